//! Finite-difference verification of every differentiable graph op.
//!
//! Analytic gradients come from the production `f32` graph; the oracle is a
//! central difference of the same graph evaluated in `f64`. Each op output is
//! projected onto a fixed random tensor so every output element contributes.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, Padding, Var};
use crate::decoder::{Arch, DecoderVars};
use crate::error::TensorError;
use crate::losses::{all_losses, LossWeights};
use crate::tensor::{Real, Tensor};

pub const STEP: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
pub const DEFAULT_INSTANCES: usize = 20;
/// Elements probed per leaf tensor; larger tensors are subsampled.
const MAX_PROBES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Dist {
    /// Uniform in `[-1, 1]`.
    Signed,
    /// Uniform in `[lo, hi]`.
    Range(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Case {
    Add,
    AddScalar,
    Sub,
    Mul,
    MulChannel,
    Div,
    PowScalar,
    PowTensor,
    Exp,
    Abs,
    Neg,
    Sigmoid,
    LeakyRelu,
    ClampMin,
    Scale,
    ConvIm2col,
    ConvIm2colZero,
    ConvDirect,
    ConvDirectZero,
    UpConv,
    UpConvZero,
    Upsample,
    SpatialGradient,
    GroupMean,
    Mean,
    Sum,
    Retinex,
    Decoders,
}

const CASES: [Case; 28] = [
    Case::Add,
    Case::AddScalar,
    Case::Sub,
    Case::Mul,
    Case::MulChannel,
    Case::Div,
    Case::PowScalar,
    Case::PowTensor,
    Case::Exp,
    Case::Abs,
    Case::Neg,
    Case::Sigmoid,
    Case::LeakyRelu,
    Case::ClampMin,
    Case::Scale,
    Case::ConvIm2col,
    Case::ConvIm2colZero,
    Case::ConvDirect,
    Case::ConvDirectZero,
    Case::UpConv,
    Case::UpConvZero,
    Case::Upsample,
    Case::SpatialGradient,
    Case::GroupMean,
    Case::Mean,
    Case::Sum,
    Case::Retinex,
    Case::Decoders,
];

fn tiny_arch(out: usize) -> Arch {
    Arch::new(3, vec![5, 4], out).expect("valid arch")
}

fn decoder_leaves(prefix: &str, arch: &Arch) -> Vec<(String, Vec<usize>, Dist)> {
    arch.layer_shapes()
        .into_iter()
        .map(|(n, s)| (format!("{prefix}.{n}"), s, Dist::Range(-0.6, 0.6)))
        .collect()
}

impl Case {
    fn name(self) -> &'static str {
        match self {
            Case::Add => "add",
            Case::AddScalar => "add/scalar_broadcast",
            Case::Sub => "sub",
            Case::Mul => "mul",
            Case::MulChannel => "mul/channel_broadcast",
            Case::Div => "div",
            Case::PowScalar => "pow_scalar_exponent",
            Case::PowTensor => "pow_tensor_exponent",
            Case::Exp => "exp",
            Case::Abs => "abs",
            Case::Neg => "neg",
            Case::Sigmoid => "sigmoid",
            Case::LeakyRelu => "leaky_relu",
            Case::ClampMin => "clamp_min",
            Case::Scale => "scale",
            Case::ConvIm2col => "conv2d/im2col_reflect",
            Case::ConvIm2colZero => "conv2d/im2col_zero",
            Case::ConvDirect => "conv2d/direct_reflect",
            Case::ConvDirectZero => "conv2d/direct_zero",
            Case::UpConv => "upsample_conv2d/reflect",
            Case::UpConvZero => "upsample_conv2d/zero",
            Case::Upsample => "upsample_nearest2x",
            Case::SpatialGradient => "spatial_gradient",
            Case::GroupMean => "channel_group_mean",
            Case::Mean => "mean",
            Case::Sum => "sum",
            Case::Retinex => "composite/retinex_losses",
            Case::Decoders => "composite/decoders_losses",
        }
    }

    /// `(name, shape, distribution)` of every leaf.
    fn leaves(self) -> Vec<(String, Vec<usize>, Dist)> {
        let l = |n: &str, s: &[usize], d: Dist| (n.to_string(), s.to_vec(), d);
        let pos = Dist::Range(0.5, 1.5);
        let map = [3, 4, 5];
        match self {
            Case::Add | Case::Sub | Case::Mul => vec![l("a", &map, Dist::Signed), l("b", &map, Dist::Signed)],
            Case::AddScalar => vec![l("a", &map, Dist::Signed), l("b", &[], Dist::Signed)],
            Case::MulChannel => vec![l("a", &map, Dist::Signed), l("b", &[1, 4, 5], Dist::Signed)],
            Case::Div => vec![l("a", &map, Dist::Signed), l("b", &map, pos)],
            Case::PowScalar => vec![l("x", &map, pos)],
            Case::PowTensor => vec![l("base", &[1, 4, 5], Dist::Range(0.2, 1.0)), l("exponent", &[], Dist::Range(0.3, 2.0))],
            Case::Exp | Case::Abs | Case::Neg | Case::Sigmoid | Case::LeakyRelu | Case::ClampMin | Case::Scale => {
                vec![l("x", &map, Dist::Signed)]
            }
            Case::ConvIm2col | Case::ConvIm2colZero => {
                let k = if self == Case::ConvIm2col { 3 } else { 5 };
                vec![l("input", &[3, 6, 6], Dist::Signed), l("kernel", &[6, 3, k, k], Dist::Signed), l("bias", &[6], Dist::Signed)]
            }
            Case::ConvDirect | Case::ConvDirectZero => {
                vec![l("input", &[4, 5, 6], Dist::Signed), l("kernel", &[2, 4, 3, 3], Dist::Signed), l("bias", &[2], Dist::Signed)]
            }
            Case::UpConv | Case::UpConvZero => {
                vec![l("input", &[3, 3, 4], Dist::Signed), l("kernel", &[5, 3, 3, 3], Dist::Signed), l("bias", &[5], Dist::Signed)]
            }
            Case::Upsample => vec![l("x", &[2, 3, 4], Dist::Signed)],
            Case::SpatialGradient => vec![l("x", &[2, 5, 5], Dist::Signed)],
            Case::GroupMean => vec![l("x", &[4, 3, 3], Dist::Signed)],
            Case::Mean | Case::Sum => vec![l("x", &[3, 4, 4], Dist::Signed)],
            Case::Retinex => vec![
                l("reflectance", &[3, 8, 8], Dist::Range(0.05, 0.95)),
                l("illumination", &[1, 8, 8], Dist::Range(0.1, 0.9)),
                l("gamma", &[], Dist::Range(0.3, 2.0)),
            ],
            Case::Decoders => {
                let mut v = vec![
                    l("seed_r", &[3, 2, 2], Dist::Signed),
                    l("seed_l", &[3, 2, 2], Dist::Signed),
                    l("gamma", &[], Dist::Range(0.3, 2.0)),
                ];
                v.extend(decoder_leaves("weights_r", &tiny_arch(3)));
                v.extend(decoder_leaves("weights_l", &tiny_arch(1)));
                v
            }
        }
    }

    /// Constant (non-learnable) inputs.
    fn constants(self) -> Vec<(Vec<usize>, Dist)> {
        match self {
            Case::Retinex | Case::Decoders => {
                vec![(vec![3, 8, 8], Dist::Range(0.0, 0.3)), (vec![1, 8, 8], Dist::Range(0.0, 0.3))]
            }
            _ => Vec::new(),
        }
    }

    fn build<T: Real>(self, g: &mut Graph<T>, x: &[Var], k: &[Var]) -> Result<Var, TensorError> {
        let w = LossWeights::paired();
        Ok(match self {
            Case::Add | Case::AddScalar => g.add(x[0], x[1])?,
            Case::Sub => g.sub(x[0], x[1])?,
            Case::Mul | Case::MulChannel => g.mul(x[0], x[1])?,
            Case::Div => g.div(x[0], x[1])?,
            Case::PowScalar => g.pow_scalar(x[0], 2.5)?,
            Case::PowTensor => g.pow(x[0], x[1])?,
            Case::Exp => g.exp(x[0]),
            Case::Abs => g.abs(x[0]),
            Case::Neg => g.neg(x[0]),
            Case::Sigmoid => g.sigmoid(x[0]),
            Case::LeakyRelu => g.leaky_relu(x[0], 0.2),
            Case::ClampMin => g.clamp_min(x[0], 0.1),
            Case::Scale => g.scale(x[0], -1.7),
            Case::ConvIm2col | Case::ConvDirect => g.conv2d(x[0], x[1], Some(x[2]), Padding::Reflect)?,
            Case::ConvIm2colZero | Case::ConvDirectZero => g.conv2d(x[0], x[1], Some(x[2]), Padding::Zero)?,
            Case::UpConv => g.upsample_conv2d(x[0], x[1], Some(x[2]), Padding::Reflect)?,
            Case::UpConvZero => g.upsample_conv2d(x[0], x[1], Some(x[2]), Padding::Zero)?,
            Case::Upsample => g.upsample_nearest2x(x[0])?,
            Case::SpatialGradient => g.spatial_gradient(x[0])?,
            Case::GroupMean => g.channel_group_mean(x[0], 2)?,
            Case::Mean => g.mean(x[0]),
            Case::Sum => g.sum(x[0]),
            Case::Retinex => all_losses(g, k[0], k[1], x[0], x[1], x[2], &w)?.total,
            Case::Decoders => {
                let nr = tiny_arch(3).layer_shapes().len();
                let vr = DecoderVars::from_vars(tiny_arch(3), x[3..3 + nr].to_vec());
                let vl = DecoderVars::from_vars(tiny_arch(1), x[3 + nr..].to_vec());
                let r = vr.decode(g, x[0])?;
                let l = vl.decode(g, x[1])?;
                all_losses(g, k[0], k[1], r, l, x[2], &w)?.total
            }
        })
    }

    /// Graph op kinds whose backward this case exercises.
    fn ops(self) -> Vec<OpKind> {
        use OpKind::*;
        match self {
            Case::Add | Case::AddScalar => vec![Add],
            Case::Sub => vec![Sub],
            Case::Mul | Case::MulChannel => vec![Mul],
            Case::Div => vec![Div],
            Case::PowScalar => vec![PowScalar],
            Case::PowTensor => vec![PowTensor],
            Case::Exp => vec![Exp],
            Case::Abs => vec![Abs],
            Case::Neg => vec![Neg],
            Case::Sigmoid => vec![Sigmoid],
            Case::LeakyRelu => vec![LeakyRelu],
            Case::ClampMin => vec![ClampMin],
            Case::Scale => vec![Scale],
            Case::ConvIm2col | Case::ConvIm2colZero | Case::ConvDirect | Case::ConvDirectZero => vec![Conv2d],
            Case::UpConv | Case::UpConvZero => vec![UpsampleConv2d],
            Case::Upsample => vec![Upsample2x],
            Case::SpatialGradient => vec![SpatialGradient],
            Case::GroupMean => vec![GroupMean],
            Case::Mean => vec![Mean],
            Case::Sum => vec![Sum],
            Case::Retinex | Case::Decoders => Vec::new(),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], dist: Dist) -> Tensor<f64> {
    let (lo, hi) = match dist {
        Dist::Signed => (-1.0, 1.0),
        Dist::Range(lo, hi) => (lo, hi),
    };
    // Values are rounded to f32 so both precisions evaluate the same point.
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi) as f32 as f64)
}

/// One gradient entry outside tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckFailure {
    pub op: String,
    pub instance: usize,
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Results for one op (or composite).
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub probes: usize,
    /// Probes discarded because the perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: Vec<CheckFailure>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn failed_ops(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed()).map(|o| o.op.as_str()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradcheck seed={} h={STEP:e} tol: abs<={ABS_TOL:e} or rel<={REL_TOL:e}", self.seed)?;
        for op in &self.ops {
            writeln!(
                f,
                "{} {:<28} instances={} probes={} skipped={} max_rel_err={:.3e} max_abs_err={:.3e}",
                if op.passed() { "ok  " } else { "FAIL" },
                op.op,
                op.instances,
                op.probes,
                op.skipped,
                op.max_rel_err,
                op.max_abs_err
            )?;
            // The largest error first; listing every entry of a broken op adds nothing.
            if let Some(worst) = op.failures.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)) {
                writeln!(
                    f,
                    "     op={} instance={} tensor={} index={} analytic={:.6e} numeric={:.6e} rel_err={:.3e} ({} failing entries)",
                    worst.op,
                    worst.instance,
                    worst.tensor,
                    worst.index,
                    worst.analytic,
                    worst.numeric,
                    worst.rel_err,
                    op.failures.len()
                )?;
            }
        }
        let failed = self.failed_ops();
        if failed.is_empty() {
            write!(f, "all {} checks passed", self.ops.len())
        } else {
            write!(f, "{} of {} checks failed: {}", failed.len(), self.ops.len(), failed.join(", "))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    /// Sign-flips the backward of one op kind, to prove the suite catches it.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seed: 0, instances: DEFAULT_INSTANCES, fault: None }
    }
}

struct Evaluated<T: Real> {
    loss: f64,
    grads: Vec<Vec<T>>,
    kinks: Vec<i8>,
}

fn evaluate<T: Real>(
    case: Case,
    leaves: &[Tensor<f64>],
    consts: &[Tensor<f64>],
    proj: &Tensor<f64>,
    fault: Option<OpKind>,
    with_grad: bool,
) -> Result<Evaluated<T>, TensorError> {
    let mut g = Graph::<T>::new();
    if let Some(kind) = fault {
        g.inject_sign_flip(kind);
    }
    let x: Vec<Var> = leaves.iter().map(|t| g.leaf(&t.cast::<T>().with_requires_grad(with_grad))).collect();
    let k: Vec<Var> = consts.iter().map(|t| g.constant(t.cast::<T>())).collect();
    let out = case.build(&mut g, &x, &k)?;
    let p = g.constant(proj.cast::<T>());
    let prod = g.mul(out, p)?;
    let loss = g.sum(prod);
    let grads = if with_grad {
        let gr = g.backward(loss)?;
        x.iter()
            .zip(leaves)
            .map(|(&v, t)| gr.get(v).map_or_else(|| vec![T::zero(); t.numel()], <[T]>::to_vec))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Evaluated { loss: g.item(loss).as_f64(), grads, kinks: g.kink_signature() })
}

fn check_case(case: Case, cfg: &GradcheckConfig, case_index: usize) -> Result<OpReport, TensorError> {
    let mut report = OpReport {
        op: case.name().to_string(),
        instances: cfg.instances,
        probes: 0,
        skipped: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        failures: Vec::new(),
    };
    let specs = case.leaves();
    for inst in 0..cfg.instances {
        let stream = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((case_index as u64) << 32 | inst as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let mut leaves: Vec<Tensor<f64>> = specs.iter().map(|(_, s, d)| draw(&mut rng, s, *d)).collect();
        let consts: Vec<Tensor<f64>> = case.constants().iter().map(|(s, d)| draw(&mut rng, s, *d)).collect();
        let proj = draw(&mut rng, &output_shape(case, &leaves, &consts)?, Dist::Signed);
        let analytic = evaluate::<f32>(case, &leaves, &consts, &proj, cfg.fault, true)?;
        let base = evaluate::<f64>(case, &leaves, &consts, &proj, None, false)?;

        for (li, (name, _, _)) in specs.iter().enumerate() {
            let n = leaves[li].numel();
            let indices: Vec<usize> =
                if n <= MAX_PROBES { (0..n).collect() } else { sample(&mut rng, n, MAX_PROBES).into_vec() };
            for idx in indices {
                let x0 = leaves[li].data()[idx];
                leaves[li].data_mut()[idx] = x0 + STEP;
                let plus = evaluate::<f64>(case, &leaves, &consts, &proj, None, false)?;
                leaves[li].data_mut()[idx] = x0 - STEP;
                let minus = evaluate::<f64>(case, &leaves, &consts, &proj, None, false)?;
                leaves[li].data_mut()[idx] = x0;
                if plus.kinks != base.kinks || minus.kinks != base.kinks {
                    report.skipped += 1;
                    continue;
                }
                report.probes += 1;
                let numeric = (plus.loss - minus.loss) / (2.0 * STEP);
                let a = analytic.grads[li][idx] as f64;
                let abs_err = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                let rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
                report.max_abs_err = report.max_abs_err.max(abs_err);
                report.max_rel_err = report.max_rel_err.max(rel_err);
                if !(abs_err <= ABS_TOL || rel_err <= REL_TOL) {
                    report.failures.push(CheckFailure {
                        op: case.name().to_string(),
                        instance: inst,
                        tensor: name.clone(),
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_err,
                    });
                }
            }
        }
    }
    Ok(report)
}

fn output_shape(case: Case, leaves: &[Tensor<f64>], consts: &[Tensor<f64>]) -> Result<Vec<usize>, TensorError> {
    let mut g = Graph::<f64>::new();
    let x: Vec<Var> = leaves.iter().map(|t| g.leaf(t)).collect();
    let k: Vec<Var> = consts.iter().map(|t| g.constant(t.clone())).collect();
    let out = case.build(&mut g, &x, &k)?;
    Ok(g.shape(out).to_vec())
}

/// Runs every check. Op-level errors (which the fixed inputs never trigger)
/// are reported as failures of that op.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> GradcheckReport {
    let ops = CASES
        .iter()
        .enumerate()
        .map(|(i, &case)| {
            check_case(case, cfg, i).unwrap_or_else(|e| OpReport {
                op: case.name().to_string(),
                instances: cfg.instances,
                probes: 0,
                skipped: 0,
                max_rel_err: f64::INFINITY,
                max_abs_err: f64::INFINITY,
                failures: vec![CheckFailure {
                    op: case.name().to_string(),
                    instance: 0,
                    tensor: format!("error: {e}"),
                    index: 0,
                    analytic: f64::NAN,
                    numeric: f64::NAN,
                    rel_err: f64::INFINITY,
                }],
            })
        })
        .collect();
    GradcheckReport { seed: cfg.seed, ops }
}

/// Op kinds with a backward that at least one check exercises directly.
pub fn covered_ops() -> Vec<OpKind> {
    let mut v: Vec<OpKind> = CASES.iter().flat_map(|c| c.ops()).collect();
    v.dedup();
    v
}
