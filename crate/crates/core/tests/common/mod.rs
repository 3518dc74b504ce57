//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the library's convolution or counting code.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regnet::arch::{ArchSpec, Depth, Family, InputGeometry, Network};
use regnet::convrnn::CellKind;
use regnet::params::ParamStore;
use regnet::tape::Mode;
use regnet::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop cross-correlation with zero padding and groups.
pub fn direct_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    direct_conv_counted(x, w, b, stride, pad, groups).0
}

/// [`direct_conv`] plus the number of kernel taps it visited, padding
/// positions included (the usual MAC convention).
pub fn direct_conv_counted(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Tensor<f64>, u64) {
    let mut taps = 0u64;
    let xs = x.shape();
    let ws = w.shape();
    let (cin_g, cout_g) = (xs.c / groups, ws.n / groups);
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            let g = o / cout_g;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ki in 0..ws.h {
                            for kj in 0..ws.w {
                                taps += 1;
                                let yy = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= xs.h as isize || xx >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(o, ci, ki, kj) * x.at(n, c, yy as usize, xx as usize);
                            }
                        }
                    }
                    let idx = y.index(n, o, i, j);
                    y.data_mut()[idx] = acc;
                }
            }
        }
    }
    (y, taps)
}

/// Gradients of `sum(direct_conv(x, w) * dy)` by the same loops.
pub fn direct_conv_grads(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    dy: &Tensor<f64>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Tensor<f64>, Tensor<f64>) {
    let xs = x.shape();
    let ws = w.shape();
    let ys = dy.shape();
    let (cin_g, cout_g) = (xs.c / groups, ws.n / groups);
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    for n in 0..xs.n {
        for o in 0..ws.n {
            let g = o / cout_g;
            for i in 0..ys.h {
                for j in 0..ys.w {
                    let up = dy.at(n, o, i, j);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ki in 0..ws.h {
                            for kj in 0..ws.w {
                                let yy = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= xs.h as isize || xx >= xs.w as isize {
                                    continue;
                                }
                                let xi = dx.index(n, c, yy as usize, xx as usize);
                                dx.data_mut()[xi] += w.at(o, ci, ki, kj) * up;
                                let wi = dw.index(o, ci, ki, kj);
                                dw.data_mut()[wi] += x.at(n, c, yy as usize, xx as usize) * up;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Largest element-wise `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Largest element-wise difference relative to the largest magnitude in `b`.
pub fn max_rel_to_scale(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    let scale = b
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

/// The conv test matrix: `(input shape, out channels, kernel, stride, pad, groups)`.
pub fn conv_matrix() -> Vec<([usize; 4], usize, usize, usize, usize, usize)> {
    let mut m = Vec::new();
    for &(n, c, h, w) in &[
        (1, 1, 5, 5),
        (2, 4, 7, 7),
        (2, 8, 9, 9),
        (1, 6, 9, 8),
        (2, 8, 4, 6),
    ] {
        for &(k, s, p) in &[
            (1, 1, 0),
            (3, 1, 1),
            (3, 2, 1),
            (5, 1, 2),
            (3, 1, 0),
            (1, 2, 0),
        ] {
            if h + 2 * p < k || w + 2 * p < k {
                continue;
            }
            for g in [1, 2, 4, 8] {
                if c % g != 0 {
                    continue;
                }
                let out = if g == c { c } else { 2 * g.max(2) };
                m.push(([n, c, h, w], out, k, s, p, g));
                if g > 1 && g < c {
                    // one output channel per group, as in the gate convolutions
                    m.push(([n, c, h, w], g, k, s, p, g));
                }
            }
        }
    }
    m
}

/// Trainable scalar count per parameter-name prefix (name minus its last
/// `.weight` / `.bias` component).
pub fn materialized_rows<T: regnet::Scalar>(store: &ParamStore<T>) -> std::collections::BTreeMap<String, i64> {
    let mut rows = std::collections::BTreeMap::new();
    for p in store.params() {
        let prefix = p
            .name
            .rsplit_once('.')
            .map_or(p.name.as_str(), |(a, _)| a)
            .to_owned();
        *rows.entry(prefix).or_insert(0) += p.value.len() as i64;
    }
    rows
}

/// Give every BN non-trivial running statistics and affine parameters.
pub fn randomize_bn(store: &mut ParamStore<f64>, seed: u64) {
    use rand::Rng;
    let mut r = rng(seed);
    for b in store.buffers_mut() {
        let mean = b.name.ends_with("running_mean");
        for v in b.value.data_mut() {
            *v = if mean {
                r.random_range(-0.3..0.3)
            } else {
                r.random_range(0.5..1.5)
            };
        }
    }
    for p in store.params_mut() {
        let is_bn =
            p.name.contains(".bn") || p.name.contains("bn_fuse") || p.name.starts_with("stem.bn");
        if !is_bn {
            continue;
        }
        let scale = p.name.ends_with(".weight");
        for v in p.value.data_mut() {
            *v = if scale {
                r.random_range(0.7..1.3)
            } else {
                r.random_range(-0.2..0.2)
            };
        }
    }
}

/// Every CIFAR family/cell/depth/mask combination plus small bottleneck nets.
pub fn spec_matrix() -> Vec<ArchSpec> {
    let mut m = Vec::new();
    for n in [1, 2, 3] {
        for classes in [10, 100] {
            m.push(ArchSpec::cifar(Family::ResNet, None, n, classes));
            m.push(ArchSpec::cifar(Family::SeResNet, None, n, classes));
            for cell in [CellKind::Vanilla, CellKind::Gru, CellKind::Lstm] {
                for fam in [Family::RegNet, Family::SeRegNet] {
                    m.push(ArchSpec::cifar(fam, Some(cell), n, classes));
                    for mask in [&[0][..], &[1], &[2], &[0, 2]] {
                        m.push(ArchSpec::cifar(fam, Some(cell), n, classes).with_regulated(mask));
                    }
                }
            }
        }
    }
    for fam in [
        Family::ResNet,
        Family::RegNet,
        Family::SeResNet,
        Family::SeRegNet,
    ] {
        for cell in [CellKind::Gru, CellKind::Lstm] {
            m.push(ArchSpec {
                family: fam,
                cell: fam.is_regulated().then_some(cell),
                depth: Depth::Bottleneck {
                    stage_blocks: vec![1, 2, 1, 1],
                },
                widths: vec![4, 8, 8, 16],
                classes: 7,
                input: InputGeometry {
                    channels: 3,
                    height: 40,
                    width: 40,
                },
                regulated_stages: vec![fam.is_regulated(); 4],
                se_reduction: 4,
            });
        }
    }
    m
}

/// Build `reg` over `plain`'s weights, switch its regulators off and return
/// the worst relative error over every block output and the logits in eval
/// mode. Panics unless every tensor of `plain` found a home in `reg`.
pub fn recovery_error(plain_spec: &ArchSpec, reg_spec: &ArchSpec, seed: u64) -> f64 {
    let mut plain = Network::<f64>::build(plain_spec, seed).unwrap();
    randomize_bn(&mut plain.store, seed + 1);
    let mut reg = Network::<f64>::build(reg_spec, seed + 2).unwrap();
    let copied = reg.copy_matching_from(&plain.store);
    assert_eq!(
        copied,
        plain.store.params().len() + plain.store.buffers().len()
    );
    reg.disable_regulators();
    let g = plain_spec.input;
    let x = Tensor::<f64>::randn([3, g.channels, g.height, g.width], &mut rng(seed + 3));
    let outs = |net: &mut Network<f64>| {
        net.run(Mode::Eval, |m, t| {
            let xv = t.input(x.clone())?;
            let f = m.forward(t, xv)?;
            let mut v: Vec<Tensor<f64>> = f
                .taps
                .iter()
                .map(|tap| t.value(tap.output).clone())
                .collect();
            v.push(t.value(f.logits).clone());
            Ok(v)
        })
        .unwrap()
    };
    let a = outs(&mut plain);
    let b = outs(&mut reg);
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(&b)
        .map(|(p, r)| max_rel(r, p))
        .fold(0.0, f64::max)
}
