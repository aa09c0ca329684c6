//! Homomorphic inference over element-wise packed batches.
//!
//! [`compile`] lowers a folded, polynomial-activated network into an
//! [`HePlan`]: a straight-line program over ciphertext registers, one
//! register per feature cell. Under element-wise packing every weight and
//! every activation coefficient is a slot-constant scalar, so the program
//! needs no rotations.
//!
//! Linear layers are not executed one by one. Each channel carries a pending
//! affine map `a*x + b` that batch norms and average pools update for free;
//! the next convolution or activation absorbs it into its constants. A Fire
//! module's squeeze and expand convolutions are composed into a single
//! linear stage. Multiplicative depth is therefore one level per
//! convolution or Fire module plus two per activation.

use std::time::Instant;

use ckks::backend::rules;
use ckks::{scales_match, HasMeta, HeBackend, HeParams, Meta};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::{RngCore, SeedableRng};
use serde::Serialize;

use crate::activation::PolyActivation;
use crate::error::{Error, Result};
use crate::model::{ActivationKind, ConvWeights, LayerSpec, LayerWeights, ModelWeights, NetworkSpec};
use crate::packing::{self, Layout, PackedTensor};

pub type Reg = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Instr {
    /// `out = rescale(sum(w * in) + bias)`; weights are encoded at the
    /// current prime so the rescale restores the input scale.
    Linear {
        out: Reg,
        terms: Vec<(Reg, f64)>,
        bias: f64,
    },
    /// `out = sum(inputs)`, no level consumed.
    Sum { out: Reg, inputs: Vec<Reg> },
    /// `out = c1*x^2 + c2*x + c3`, two levels.
    Poly { out: Reg, input: Reg, c: [f64; 3] },
}

impl Instr {
    pub fn out(&self) -> Reg {
        match self {
            Instr::Linear { out, .. } | Instr::Sum { out, .. } | Instr::Poly { out, .. } => *out,
        }
    }

    fn for_each_input(&self, mut f: impl FnMut(Reg)) {
        match self {
            Instr::Linear { terms, .. } => terms.iter().for_each(|&(r, _)| f(r)),
            Instr::Sum { inputs, .. } => inputs.iter().for_each(|&r| f(r)),
            Instr::Poly { input, .. } => f(*input),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Planned {
    pub instr: Instr,
    /// Level and scale the output register must have at runtime.
    pub expected: Meta,
    /// Index of the network layer this instruction came from.
    pub layer: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub add: usize,
    pub cmult: usize,
    pub mult: usize,
    pub rot: usize,
    pub rescale: usize,
}

impl OpCounts {
    fn of(instr: &Instr) -> Self {
        match instr {
            Instr::Linear { terms, .. } => OpCounts {
                // every term product plus the bias addition
                add: terms.len(),
                cmult: terms.len(),
                rescale: 1,
                ..Default::default()
            },
            Instr::Sum { inputs, .. } => OpCounts {
                add: inputs.len() - 1,
                ..Default::default()
            },
            Instr::Poly { .. } => OpCounts {
                add: 2,
                cmult: 2,
                mult: 1,
                rescale: 3,
                rot: 0,
            },
        }
    }

    fn accumulate(&mut self, o: OpCounts) {
        self.add += o.add;
        self.cmult += o.cmult;
        self.mult += o.mult;
        self.rot += o.rot;
        self.rescale += o.rescale;
    }
}

#[derive(Clone, Debug)]
pub struct HePlan {
    pub input_shape: (usize, usize, usize),
    pub input_meta: Meta,
    pub instrs: Vec<Planned>,
    /// Output registers in `(class, 0, 0)` order.
    pub outputs: Vec<Reg>,
    pub num_registers: usize,
    pub depth: usize,
    last_use: Vec<usize>,
}

impl HePlan {
    pub fn op_counts(&self) -> OpCounts {
        let mut c = OpCounts::default();
        for p in &self.instrs {
            c.accumulate(OpCounts::of(&p.instr));
        }
        c
    }

    pub fn output_meta(&self) -> Meta {
        self.outputs
            .first()
            .and_then(|&r| self.instrs.iter().rev().find(|p| p.instr.out() == r))
            .map(|p| p.expected)
            .unwrap_or(self.input_meta)
    }
}

/// Static cost of a plan, also produced for layouts that are only modelled.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostEstimate {
    pub layout: Layout,
    pub batch: usize,
    pub counts: OpCounts,
    pub depth: usize,
    pub total_s: f64,
    pub amortized_s: f64,
}

/// Seconds per primitive operation, measured on a concrete backend.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct OpTimings {
    pub add: f64,
    pub cmult: f64,
    pub mult: f64,
    pub rot: f64,
    pub rescale: f64,
}

impl OpTimings {
    pub fn total(&self, c: &OpCounts) -> f64 {
        self.add * c.add as f64
            + self.cmult * c.cmult as f64
            + self.mult * c.mult as f64
            + self.rot * c.rot as f64
            + self.rescale * c.rescale as f64
    }

    /// Averages `reps` runs of each operation on fresh top-level
    /// ciphertexts. Rotation is timed only if a step-1 key is available.
    pub fn measure<B: HeBackend, R: RngCore + ?Sized>(he: &B, reps: usize, rng: &mut R) -> Result<Self> {
        let reps = reps.max(1);
        let level = he.max_level();
        let v: Vec<f64> = (0..he.slot_count()).map(|i| (i % 7) as f64 / 7.0).collect();
        let a = he.encode_encrypt(&v, rng)?;
        let b = he.encode_encrypt(&v, rng)?;
        let w = he.encode_constant(0.5, he.params().modulus_chain[level] as f64, level)?;
        let time = |f: &mut dyn FnMut() -> Result<()>| -> Result<f64> {
            let t = Instant::now();
            for _ in 0..reps {
                f()?;
            }
            Ok(t.elapsed().as_secs_f64() / reps as f64)
        };
        let prod = he.mult(&a, &b)?;
        Ok(Self {
            add: time(&mut || Ok(he.add(&a, &b).map(drop)?))?,
            cmult: time(&mut || Ok(he.cmult(&a, &w).map(drop)?))?,
            mult: time(&mut || Ok(he.mult(&a, &b).map(drop)?))?,
            rescale: time(&mut || Ok(he.rescale(&prod).map(drop)?))?,
            rot: match he.rotate(&a, 1) {
                Ok(_) => time(&mut || Ok(he.rotate(&a, 1).map(drop)?))?,
                Err(_) => 0.0,
            },
        })
    }
}

struct Grid {
    shape: (usize, usize, usize),
    regs: Vec<Reg>,
    /// Pending per-channel affine map on top of the register values.
    pending: Vec<(f64, f64)>,
    meta: Meta,
}

impl Grid {
    fn reg(&self, c: usize, h: usize, w: usize) -> Reg {
        self.regs[(c * self.shape.1 + h) * self.shape.2 + w]
    }

    fn is_identity(&self) -> bool {
        self.pending.iter().all(|&(a, b)| a == 1.0 && b == 0.0)
    }
}

/// A convolution ready to be lowered: weights `(out, in, k, k)`, an optional
/// per-tap constant that is added only where the tap hits real input, and
/// a bias.
struct LinearConv {
    weight: Array4<f64>,
    tap_bias: Option<Array3<f64>>,
    bias: Array1<f64>,
    stride: usize,
    pad: usize,
}

impl LinearConv {
    fn plain(c: &ConvWeights, stride: usize, pad: usize) -> Self {
        Self {
            weight: c.weight.clone(),
            tap_bias: None,
            bias: c.bias.clone(),
            stride,
            pad,
        }
    }

    /// `expand o squeeze` for a Fire branch; the squeeze bias only flows
    /// through taps that land inside the image.
    fn composed(squeeze: &ConvWeights, expand: &ConvWeights, pad: usize) -> Self {
        let (o, s, k, _) = expand.weight.dim();
        let i = squeeze.weight.dim().1;
        let sq = squeeze.weight.to_shape((s, i)).unwrap().to_owned();
        let mut weight = Array4::zeros((o, i, k, k));
        let mut tap = Array3::zeros((o, k, k));
        for oc in 0..o {
            for di in 0..k {
                for dj in 0..k {
                    for d in 0..s {
                        let e = expand.weight[[oc, d, di, dj]];
                        tap[[oc, di, dj]] += e * squeeze.bias[d];
                        for ic in 0..i {
                            weight[[oc, ic, di, dj]] += e * sq[[d, ic]];
                        }
                    }
                }
            }
        }
        Self {
            weight,
            tap_bias: Some(tap),
            bias: expand.bias.clone(),
            stride: 1,
            pad,
        }
    }
}

struct Compiler<'a> {
    params: &'a HeParams,
    enforce_depth: bool,
    keep: bool,
    instrs: Vec<Planned>,
    counts: OpCounts,
    next_reg: Reg,
    layer: usize,
}

impl Compiler<'_> {
    fn fresh(&mut self) -> Reg {
        self.next_reg += 1;
        self.next_reg - 1
    }

    fn push(&mut self, instr: Instr, expected: Meta) {
        self.counts.accumulate(OpCounts::of(&instr));
        if self.keep {
            self.instrs.push(Planned {
                instr,
                expected,
                layer: self.layer,
            });
        }
    }

    fn levels(&self, meta: &Meta, need: usize, what: &str) -> Result<()> {
        if self.enforce_depth && meta.level < need {
            let used = self.params.max_level() - meta.level;
            return Err(Error::DepthExceeded {
                needed: used + need,
                available: self.params.max_level(),
                layer: format!("{} (layer {})", what, self.layer),
            });
        }
        Ok(())
    }

    fn linear_meta(&self, m: &Meta) -> Result<Meta> {
        if m.level == 0 {
            return Ok(Meta { level: 0, ..*m });
        }
        let q = self.params.modulus_chain[m.level] as f64;
        let w = Meta { scale: q, ..*m };
        Ok(rules::rescale(self.params, &rules::cmult(self.params, m, &w)?)?)
    }

    fn poly_meta(&self, m: &Meta) -> Result<Meta> {
        if m.level < 2 {
            return Ok(Meta { level: 0, ..*m });
        }
        let p = self.params;
        let sq = rules::rescale(p, &rules::mult(p, m, m)?)?;
        let c1 = Meta {
            scale: p.modulus_chain[sq.level] as f64,
            ..sq
        };
        let t1 = rules::rescale(p, &rules::cmult(p, &sq, &c1)?)?;
        let t2 = rules::rescale(p, &rules::cmult(p, m, m)?)?;
        let t2 = rules::mod_down(&t2, t1.level)?;
        rules::add(&t1, &t2)?;
        Ok(t1)
    }

    fn conv(&mut self, g: &Grid, conv: &LinearConv, what: &str) -> Result<Grid> {
        self.levels(&g.meta, 1, what)?;
        let (c, h, w) = g.shape;
        let (o, ci, k, _) = conv.weight.dim();
        if ci != c {
            return Err(Error::Shape(format!(
                "{what}: {ci} input channels for a {c}-channel grid"
            )));
        }
        let ho = (h + 2 * conv.pad - k) / conv.stride + 1;
        let wo = (w + 2 * conv.pad - k) / conv.stride + 1;
        let meta = self.linear_meta(&g.meta)?;
        let mut regs = Vec::with_capacity(o * ho * wo);
        for oc in 0..o {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut terms = Vec::with_capacity(c * k * k);
                    let mut bias = conv.bias[oc];
                    for di in 0..k {
                        let ii = (oi * conv.stride + di) as isize - conv.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for dj in 0..k {
                            let jj = (oj * conv.stride + dj) as isize - conv.pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            if let Some(t) = &conv.tap_bias {
                                bias += t[[oc, di, dj]];
                            }
                            for ic in 0..c {
                                let wt = conv.weight[[oc, ic, di, dj]];
                                let (a, b) = g.pending[ic];
                                terms.push((g.reg(ic, ii as usize, jj as usize), wt * a));
                                bias += wt * b;
                            }
                        }
                    }
                    let out = self.fresh();
                    self.push(Instr::Linear { out, terms, bias }, meta);
                    regs.push(out);
                }
            }
        }
        Ok(Grid {
            shape: (o, ho, wo),
            regs,
            pending: vec![(1.0, 0.0); o],
            meta,
        })
    }

    fn pool(&mut self, g: &Grid, window: usize, stride: usize) -> Grid {
        let (c, h, w) = g.shape;
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let mut regs = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut inputs = Vec::with_capacity(window * window);
                    for di in 0..window {
                        for dj in 0..window {
                            inputs.push(g.reg(ch, oi * stride + di, oj * stride + dj));
                        }
                    }
                    if inputs.len() == 1 {
                        regs.push(inputs[0]);
                    } else {
                        let out = self.fresh();
                        self.push(Instr::Sum { out, inputs }, g.meta);
                        regs.push(out);
                    }
                }
            }
        }
        let inv = 1.0 / (window * window) as f64;
        Grid {
            shape: (c, ho, wo),
            regs,
            pending: g.pending.iter().map(|&(a, b)| (a * inv, b)).collect(),
            meta: g.meta,
        }
    }

    fn global_pool(&mut self, g: &Grid) -> Grid {
        let (c, h, w) = g.shape;
        let area = h * w;
        let mut regs = Vec::with_capacity(c);
        for ch in 0..c {
            let inputs = g.regs[ch * area..(ch + 1) * area].to_vec();
            if area == 1 {
                regs.push(inputs[0]);
            } else {
                let out = self.fresh();
                self.push(Instr::Sum { out, inputs }, g.meta);
                regs.push(out);
            }
        }
        let inv = 1.0 / area as f64;
        Grid {
            shape: (c, 1, 1),
            regs,
            pending: g.pending.iter().map(|&(a, b)| (a * inv, b)).collect(),
            meta: g.meta,
        }
    }

    fn activation(&mut self, g: &Grid, act: &PolyActivation) -> Result<Grid> {
        self.levels(&g.meta, 2, "activation")?;
        if act.shape != g.shape {
            return Err(Error::Shape("activation coefficients do not match the grid".into()));
        }
        let meta = self.poly_meta(&g.meta)?;
        let (c, h, w) = g.shape;
        let mut regs = Vec::with_capacity(g.regs.len());
        for ch in 0..c {
            let (a, b) = g.pending[ch];
            for i in 0..h {
                for j in 0..w {
                    let [c1, c2, c3] = act.coeffs_at(ch, i, j);
                    // p(a*x + b) expanded in x
                    let coeffs = [c1 * a * a, 2.0 * c1 * a * b + c2 * a, c1 * b * b + c2 * b + c3];
                    let out = self.fresh();
                    self.push(
                        Instr::Poly {
                            out,
                            input: g.reg(ch, i, j),
                            c: coeffs,
                        },
                        meta,
                    );
                    regs.push(out);
                }
            }
        }
        Ok(Grid {
            shape: g.shape,
            regs,
            pending: vec![(1.0, 0.0); c],
            meta,
        })
    }
}

/// Rewrites the producer of `reg` so that it yields `a*v + b` instead of `v`.
/// Fails when the register has other readers or no rewritable producer.
fn fold_into_producer(instrs: &mut [Planned], uses: &[usize], reg: Reg, a: f64, b: f64) -> bool {
    let Some(pos) = instrs.iter().rposition(|p| p.instr.out() == reg) else {
        return false;
    };
    if uses[reg] > 1 {
        return false;
    }
    if let Instr::Sum { inputs, .. } = &instrs[pos].instr {
        let inputs = inputs.clone();
        let k = inputs.len() as f64;
        let foldable = inputs.iter().all(|&r| {
            uses[r] == 1
                && instrs
                    .iter()
                    .rposition(|p| p.instr.out() == r)
                    .is_some_and(|i| !matches!(instrs[i].instr, Instr::Sum { .. }))
        });
        if !foldable {
            return false;
        }
        for r in inputs {
            fold_into_producer(instrs, uses, r, a, b / k);
        }
        return true;
    }
    match &mut instrs[pos].instr {
        Instr::Linear { terms, bias, .. } => {
            terms.iter_mut().for_each(|t| t.1 *= a);
            *bias = a * *bias + b;
        }
        Instr::Poly { c, .. } => {
            c[0] *= a;
            c[1] *= a;
            c[2] = a * c[2] + b;
        }
        Instr::Sum { .. } => unreachable!(),
    }
    true
}

fn lower(
    spec: &NetworkSpec,
    weights: &ModelWeights,
    params: &HeParams,
    enforce_depth: bool,
    keep: bool,
) -> Result<(Vec<Planned>, OpCounts, Grid, usize)> {
    spec.validate()?;
    weights.check(spec)?;
    let (c, h, w) = spec.input;
    let input_meta = Meta {
        level: params.max_level(),
        scale: params.default_scale,
        slots: params.slot_count(),
    };
    let mut comp = Compiler {
        params,
        enforce_depth,
        keep,
        instrs: Vec::new(),
        counts: OpCounts::default(),
        next_reg: c * h * w,
        layer: 0,
    };
    let mut g = Grid {
        shape: spec.input,
        regs: (0..c * h * w).collect(),
        pending: vec![(1.0, 0.0); c],
        meta: input_meta,
    };
    for (i, (layer, lw)) in spec.layers.iter().zip(&weights.layers).enumerate() {
        comp.layer = i;
        g = match (layer, lw) {
            (LayerSpec::Conv { stride, padding, .. }, LayerWeights::Conv(cw)) => {
                comp.conv(&g, &LinearConv::plain(cw, *stride, *padding), "conv")?
            }
            (
                LayerSpec::Fire { .. },
                LayerWeights::Fire {
                    squeeze,
                    expand1x1,
                    expand3x3,
                },
            ) => {
                let a = comp.conv(&g, &LinearConv::composed(squeeze, expand1x1, 0), "fire")?;
                let b = comp.conv(&g, &LinearConv::composed(squeeze, expand3x3, 1), "fire")?;
                let mut regs = a.regs;
                regs.extend(b.regs);
                Grid {
                    shape: (a.shape.0 + b.shape.0, a.shape.1, a.shape.2),
                    regs,
                    pending: vec![(1.0, 0.0); a.shape.0 + b.shape.0],
                    meta: a.meta,
                }
            }
            (LayerSpec::Affine { .. }, LayerWeights::Affine(aw)) => {
                let pending = g
                    .pending
                    .iter()
                    .enumerate()
                    .map(|(ch, &(a, b))| (aw.scale[ch] * a, aw.scale[ch] * b + aw.shift[ch]))
                    .collect();
                Grid { pending, ..g }
            }
            (LayerSpec::AvgPool { window, stride }, _) => comp.pool(&g, *window, *stride),
            (LayerSpec::GlobalAvgPool, _) => comp.global_pool(&g),
            (
                LayerSpec::Activation {
                    activation: ActivationKind::Poly { .. },
                },
                LayerWeights::Poly(p),
            ) => comp.activation(&g, p)?,
            (
                LayerSpec::Activation {
                    activation: ActivationKind::Relu,
                },
                _,
            ) => return Err(Error::Unsupported(format!("layer {i}: ReLU has no polynomial form"))),
            (LayerSpec::BatchNorm { .. }, _) => {
                return Err(Error::Unsupported(format!(
                    "layer {i}: batch norm must be folded first"
                )))
            }
            _ => return Err(Error::Shape(format!("weights for layer {i} do not match"))),
        };
    }
    let next_reg = comp.next_reg;
    Ok((comp.instrs, comp.counts, g, next_reg))
}

/// Compiles a folded polynomial network for inputs encrypted at the top
/// level with the default scale.
pub fn compile(spec: &NetworkSpec, weights: &ModelWeights, params: &HeParams) -> Result<HePlan> {
    let (mut instrs, _, mut g, mut next_reg) = lower(spec, weights, params, true, true)?;
    if !g.is_identity() {
        let mut uses = vec![0usize; next_reg];
        for p in &instrs {
            p.instr.for_each_input(|r| uses[r] += 1);
        }
        let mut outputs = Vec::with_capacity(g.regs.len());
        for (ch, &reg) in g.regs.iter().enumerate() {
            let (a, b) = g.pending[ch];
            if (a == 1.0 && b == 0.0) || fold_into_producer(&mut instrs, &uses, reg, a, b) {
                outputs.push(reg);
                continue;
            }
            // no single-reader producer: spend one more level on the map
            if g.meta.level == 0 {
                return Err(Error::DepthExceeded {
                    needed: params.max_level() + 1,
                    available: params.max_level(),
                    layer: "final affine".into(),
                });
            }
            let q = params.modulus_chain[g.meta.level] as f64;
            let meta = rules::rescale(params, &rules::cmult(params, &g.meta, &Meta { scale: q, ..g.meta })?)?;
            let out = next_reg;
            next_reg += 1;
            instrs.push(Planned {
                instr: Instr::Linear {
                    out,
                    terms: vec![(reg, a)],
                    bias: b,
                },
                expected: meta,
                layer: spec.layers.len(),
            });
            outputs.push(out);
        }
        g.regs = outputs;
    }
    let mut last_use = vec![usize::MAX; next_reg];
    for (idx, p) in instrs.iter().enumerate() {
        p.instr.for_each_input(|r| last_use[r] = idx);
    }
    for &r in &g.regs {
        last_use[r] = usize::MAX;
    }
    let input_meta = Meta {
        level: params.max_level(),
        scale: params.default_scale,
        slots: params.slot_count(),
    };
    let out_level = g
        .regs
        .iter()
        .map(|&r| {
            instrs
                .iter()
                .rev()
                .find(|p| p.instr.out() == r)
                .map_or(input_meta.level, |p| p.expected.level)
        })
        .min()
        .unwrap_or(input_meta.level);
    Ok(HePlan {
        input_shape: spec.input,
        input_meta,
        depth: params.max_level() - out_level,
        instrs,
        outputs: g.regs,
        num_registers: next_reg,
        last_use,
    })
}

/// Depth from the layer list alone: one level per convolution or Fire
/// module, two per activation.
pub fn analytic_depth(spec: &NetworkSpec) -> usize {
    spec.layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv { .. } | LayerSpec::Fire { .. } => 1,
            LayerSpec::Activation { .. } => 2,
            _ => 0,
        })
        .sum()
}

fn check_meta(index: usize, expected: &Meta, actual: &Meta) -> Result<()> {
    if expected.level != actual.level || expected.scale != actual.scale {
        return Err(Error::PlanDrift {
            index,
            expected: format!("level {} scale 2^{:.6}", expected.level, expected.scale.log2()),
            actual: format!("level {} scale 2^{:.6}", actual.level, actual.scale.log2()),
        });
    }
    Ok(())
}

fn run_linear<B: HeBackend>(
    he: &B,
    regs: &[Option<B::Ciphertext>],
    terms: &[(Reg, f64)],
    bias: f64,
) -> Result<B::Ciphertext> {
    let first = regs[terms[0].0].as_ref().expect("live register");
    let level = first.level();
    let q = he.params().modulus_chain[level] as f64;
    let mut acc: Option<B::Ciphertext> = None;
    for &(r, w) in terms {
        let x = regs[r].as_ref().expect("live register");
        let t = he.cmult(x, &he.encode_constant(w, q, level)?)?;
        acc = Some(match acc {
            None => t,
            Some(a) => he.add(&a, &t)?,
        });
    }
    let acc = acc.expect("at least one term");
    let acc = he.add_plain(&acc, &he.encode_constant(bias, acc.scale(), level)?)?;
    Ok(he.rescale(&acc)?)
}

fn run_poly<B: HeBackend>(he: &B, x: &B::Ciphertext, c: [f64; 3]) -> Result<B::Ciphertext> {
    let (level, scale) = (x.level(), x.scale());
    let chain = &he.params().modulus_chain;
    let sq = he.rescale(&he.mult(x, x)?)?;
    let t1 = he.rescale(&he.cmult(&sq, &he.encode_constant(c[0], chain[level - 1] as f64, level - 1)?)?)?;
    let t2 = he.rescale(&he.cmult(x, &he.encode_constant(c[1], scale, level)?)?)?;
    let t2 = he.mod_down_to(&t2, t1.level())?;
    debug_assert!(scales_match(t1.scale(), t2.scale()));
    let sum = he.add(&t1, &t2)?;
    let c3 = he.encode_constant(c[2], sum.scale(), sum.level())?;
    Ok(he.add_plain(&sum, &c3)?)
}

/// Runs a plan; the result holds one `(1, 1)` cell per class whose slot `i`
/// is image `i`'s logit. Every register's level and scale is checked
/// against the compile-time prediction.
pub fn execute<B: HeBackend>(
    plan: &HePlan,
    he: &B,
    input: &PackedTensor<B::Ciphertext>,
) -> Result<PackedTensor<B::Ciphertext>> {
    if input.shape != plan.input_shape {
        return Err(Error::Shape(format!(
            "plan expects {:?} cells, got {:?}",
            plan.input_shape, input.shape
        )));
    }
    for ct in &input.cells {
        check_meta(usize::MAX, &plan.input_meta, &ct.meta())?;
    }
    let mut regs: Vec<Option<B::Ciphertext>> = vec![None; plan.num_registers];
    for (r, ct) in input.cells.iter().enumerate() {
        regs[r] = Some(ct.clone());
    }
    for (idx, p) in plan.instrs.iter().enumerate() {
        let out = match &p.instr {
            Instr::Linear { terms, bias, .. } => run_linear(he, &regs, terms, *bias)?,
            Instr::Sum { inputs, .. } => {
                let mut acc = regs[inputs[0]].clone().expect("live register");
                for &r in &inputs[1..] {
                    acc = he.add(&acc, regs[r].as_ref().expect("live register"))?;
                }
                acc
            }
            Instr::Poly { input, c, .. } => run_poly(he, regs[*input].as_ref().expect("live register"), *c)?,
        };
        check_meta(idx, &p.expected, &out.meta())?;
        regs[p.instr.out()] = Some(out);
        p.instr.for_each_input(|r| {
            if plan.last_use[r] == idx {
                regs[r] = None;
            }
        });
    }
    let cells = plan
        .outputs
        .iter()
        .map(|&r| regs[r].clone().expect("output register"))
        .collect::<Vec<_>>();
    Ok(PackedTensor {
        shape: (cells.len(), 1, 1),
        batch: input.batch,
        cells,
    })
}

/// Pack, encrypt, execute, decrypt, and unpack a batch; returns `(M, classes)` logits.
pub fn infer_batch<B: HeBackend, R: RngCore + ?Sized>(
    plan: &HePlan,
    he: &B,
    batch: &Array4<f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let m = batch.dim().0;
    let packed = packing::pack_elementwise(batch, he.slot_count())?;
    let enc = packing::encrypt_packed(he, &packed, rng)?;
    let out = execute(plan, he, &enc)?;
    let dec = packing::decrypt_packed(he, &out)?;
    let logits = packing::unpack_elementwise(&dec, m)?;
    Ok(crate::model::flatten_logits(logits))
}

/// Rotation-based convolution over channel-packed ciphertexts, modelled
/// analytically: each input ciphertext is rotated once per non-centre tap
/// and the rotations are shared by all output channels.
fn channelwise_counts(spec: &NetworkSpec, m: usize) -> Result<OpCounts> {
    let shapes = spec.shapes()?;
    let mut c = OpCounts::default();
    let conv = |c: &mut OpCounts, cin: usize, cout: usize, k: usize| {
        let taps = k * k;
        c.rot += m * cin * (taps - 1);
        c.cmult += m * cout * cin * taps;
        c.add += m * cout * cin * taps;
        c.rescale += m * cout;
    };
    for (layer, &(ch, h, w)) in spec.layers.iter().zip(&shapes) {
        match *layer {
            LayerSpec::Conv {
                in_ch, out_ch, kernel, ..
            } => conv(&mut c, in_ch, out_ch, kernel),
            LayerSpec::Fire {
                in_ch,
                squeeze,
                expand1x1,
                expand3x3,
            } => {
                conv(&mut c, in_ch, squeeze, 1);
                conv(&mut c, squeeze, expand1x1, 1);
                conv(&mut c, squeeze, expand3x3, 3);
            }
            LayerSpec::Activation { .. } => {
                c.mult += m * ch;
                c.cmult += 2 * m * ch;
                c.add += 2 * m * ch;
                c.rescale += 3 * m * ch;
            }
            LayerSpec::AvgPool { window, .. } => {
                let taps = window * window;
                c.rot += m * ch * (taps - 1);
                c.add += m * ch * (taps - 1);
                c.cmult += m * ch;
                c.rescale += m * ch;
            }
            LayerSpec::GlobalAvgPool => {
                let steps = ((h * w) as f64).log2().ceil() as usize;
                c.rot += m * ch * steps;
                c.add += m * ch * steps;
                c.cmult += m * ch;
                c.rescale += m * ch;
            }
            LayerSpec::BatchNorm { .. } | LayerSpec::Affine { .. } => {}
        }
    }
    Ok(c)
}

/// Static operation counts and predicted wall time for a batch of `m`
/// images. Element-wise counts come from lowering the network (weights do
/// not change the instruction stream); channel-wise counts are modelled.
pub fn estimate_cost(
    spec: &NetworkSpec,
    params: &HeParams,
    m: usize,
    layout: Layout,
    timings: &OpTimings,
) -> Result<CostEstimate> {
    let poly = spec.with_activation(match spec.activations().next() {
        Some(ActivationKind::Poly { granularity }) => ActivationKind::Poly { granularity },
        _ => ActivationKind::Poly {
            granularity: crate::activation::Granularity::Element,
        },
    });
    let m = m.max(1);
    let (counts, total) = match layout {
        Layout::ElementWise => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let w = ModelWeights::init(&poly, 0.0, &mut rng)?;
            let (fs, fw) = crate::model::fold_batchnorm(&poly, &w)?;
            let (_, counts, _, _) = lower(&fs, &fw, params, false, false)?;
            // one instruction stream serves the whole batch
            (counts, timings.total(&counts))
        }
        Layout::ChannelWise => {
            let counts = channelwise_counts(&poly, m)?;
            (counts, timings.total(&counts))
        }
    };
    Ok(CostEstimate {
        layout,
        batch: m,
        counts,
        depth: analytic_depth(&poly),
        total_s: total,
        amortized_s: total / m as f64,
    })
}

/// One measured point of the batch-size sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkRow {
    #[serde(rename = "M")]
    pub m: usize,
    pub layout: Layout,
    pub total_s: f64,
    pub amortized_s: f64,
    pub add_count: usize,
    pub cmult_count: usize,
    pub mult_count: usize,
    pub rot_count: usize,
    pub depth: usize,
}

/// Times `execute` (encryption and decryption excluded) on random batches
/// of each size.
pub fn benchmark<B: HeBackend, R: RngCore>(
    plan: &HePlan,
    he: &B,
    batch_sizes: &[usize],
    rng: &mut R,
) -> Result<Vec<BenchmarkRow>> {
    use rand::Rng;
    let counts = plan.op_counts();
    let (c, h, w) = plan.input_shape;
    let mut rows = Vec::new();
    for &m in batch_sizes {
        let batch = Array4::from_shape_simple_fn((m, c, h, w), || rng.gen_range(-1.0..1.0));
        let packed = packing::pack_elementwise(&batch, he.slot_count())?;
        let enc = packing::encrypt_packed(he, &packed, rng)?;
        let t = Instant::now();
        let out = execute(plan, he, &enc)?;
        let total = t.elapsed().as_secs_f64();
        drop(out);
        rows.push(BenchmarkRow {
            m,
            layout: Layout::ElementWise,
            total_s: total,
            amortized_s: total / m as f64,
            add_count: counts.add,
            cmult_count: counts.cmult,
            mult_count: counts.mult,
            rot_count: counts.rot,
            depth: plan.depth,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Granularity;
    use crate::model::{self, AffineWeights};
    use ckks::{CkksBackend, SimBackend};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    fn batch(rng: &mut ChaCha8Rng, m: usize, shape: (usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn((m, shape.0, shape.1, shape.2), || rng.gen_range(-1.0..1.0))
    }

    fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn pointwise(cin: usize, classes: usize) -> NetworkSpec {
        NetworkSpec {
            input: (cin, 1, 1),
            num_classes: classes,
            layers: vec![LayerSpec::conv(cin, classes, 1), LayerSpec::GlobalAvgPool],
        }
    }

    #[test]
    fn pointwise_conv_is_one_linear_per_class() {
        let spec = pointwise(3, 2);
        let mut w = ModelWeights::init(&spec, 0.0, &mut rng()).unwrap();
        if let LayerWeights::Conv(c) = &mut w.layers[0] {
            c.weight = Array4::from_shape_vec((2, 3, 1, 1), vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
            c.bias = Array1::from(vec![0.25, -1.0]);
        }
        let params = HeParams::toy(64, 2).unwrap();
        let plan = compile(&spec, &w, &params).unwrap();
        assert_eq!(plan.instrs.len(), 2);
        assert_eq!(plan.depth, 1);
        assert_eq!(
            plan.op_counts(),
            OpCounts {
                add: 6,
                cmult: 6,
                mult: 0,
                rot: 0,
                rescale: 2
            }
        );
        let sim = SimBackend::new(params, &[]).unwrap();
        let x = Array4::from_shape_vec((2, 3, 1, 1), vec![1.0, 1.0, 1.0, 2.0, 0.0, -2.0]).unwrap();
        let out = infer_batch(&plan, &sim, &x, &mut rng()).unwrap();
        // [1,2,3].[1,1,1]+0.25, [-1,.5,0].[1,1,1]-1, and likewise for image 2
        let want = Array2::from_shape_vec((2, 2), vec![6.25, -1.5, -3.75, -3.0]).unwrap();
        assert!(max_diff(&out, &want) < 1e-9, "{out:?}");
    }

    #[test]
    fn activation_consumes_two_levels() {
        let spec = NetworkSpec {
            input: (1, 1, 1),
            num_classes: 2,
            layers: vec![
                LayerSpec::conv(1, 2, 1),
                LayerSpec::Activation {
                    activation: ActivationKind::Poly {
                        granularity: Granularity::Channel,
                    },
                },
                LayerSpec::GlobalAvgPool,
            ],
        };
        let w = ModelWeights::init(&spec, 0.3, &mut rng()).unwrap();
        let params = HeParams::toy(64, 4).unwrap();
        let plan = compile(&spec, &w, &params).unwrap();
        assert_eq!(plan.depth, 3);
        assert_eq!(plan.output_meta().level, 1);
        let counts = plan.op_counts();
        assert_eq!((counts.mult, counts.cmult), (2, 2 + 2 * 2));
        // two levels short of room
        let tight = HeParams::toy(64, 2).unwrap();
        match compile(&spec, &w, &tight) {
            Err(Error::DepthExceeded {
                needed,
                available,
                layer,
            }) => {
                assert_eq!((needed, available), (3, 2));
                assert!(layer.contains("activation"), "{layer}");
            }
            other => panic!("expected DepthExceeded, got {other:?}"),
        }
    }

    #[test]
    fn relu_and_unfolded_batch_norm_are_rejected() {
        let spec = model::build_squeezenet_opt(10, (3, 8, 8), ActivationKind::Relu).unwrap();
        let w = ModelWeights::init(&spec, 0.0, &mut rng()).unwrap();
        let params = HeParams::large();
        assert!(matches!(compile(&spec, &w, &params), Err(Error::Unsupported(_))));
        let poly = spec.with_activation(ActivationKind::Poly {
            granularity: Granularity::Layer,
        });
        let w = ModelWeights::init(&poly, 0.0, &mut rng()).unwrap();
        assert!(matches!(compile(&poly, &w, &params), Err(Error::Unsupported(_))));
    }

    #[test]
    fn squeezenet_depth_matches_layer_count() {
        let spec = model::build_squeezenet_opt(
            10,
            (3, 8, 8),
            ActivationKind::Poly {
                granularity: Granularity::Channel,
            },
        )
        .unwrap();
        let counts = spec.module_counts();
        let acts = spec.activations().count();
        assert_eq!(analytic_depth(&spec), counts.conv + counts.fire + 2 * acts);
        assert_eq!(analytic_depth(&spec), 18);
        let w = ModelWeights::init(&spec, 0.1, &mut rng()).unwrap();
        let (fs, fw) = model::fold_batchnorm(&spec, &w).unwrap();
        let plan = compile(&fs, &fw, &HeParams::large()).unwrap();
        assert_eq!(plan.depth, 18);
        assert_eq!(plan.op_counts().rot, 0);
        assert!(matches!(
            compile(&fs, &fw, &HeParams::desk()),
            Err(Error::DepthExceeded { available: 10, .. })
        ));
    }

    #[test]
    fn trailing_affine_is_folded_without_a_level() {
        // conv -> affine -> pool: the affine lands in the conv constants
        let spec = NetworkSpec {
            input: (2, 2, 2),
            num_classes: 2,
            layers: vec![
                LayerSpec::conv(2, 2, 1),
                LayerSpec::Affine { channels: 2 },
                LayerSpec::GlobalAvgPool,
            ],
        };
        let mut w = ModelWeights::init(&spec, 0.0, &mut rng()).unwrap();
        w.layers[1] = LayerWeights::Affine(AffineWeights {
            scale: Array1::from(vec![2.0, -0.5]),
            shift: Array1::from(vec![1.0, 3.0]),
        });
        let params = HeParams::toy(64, 2).unwrap();
        let plan = compile(&spec, &w, &params).unwrap();
        assert_eq!(plan.depth, 1);
        let sim = SimBackend::new(params, &[]).unwrap();
        let mut r = rng();
        let x = batch(&mut r, 3, spec.input);
        let got = infer_batch(&plan, &sim, &x, &mut r).unwrap();
        let want = model::logits(&spec, &w, &x).unwrap();
        assert!(max_diff(&got, &want) < 1e-9);
    }

    #[test]
    fn fire_followed_by_affine_costs_one_level() {
        let spec = NetworkSpec {
            input: (1, 3, 3),
            num_classes: 2,
            layers: vec![
                LayerSpec::Fire {
                    in_ch: 1,
                    squeeze: 2,
                    expand1x1: 1,
                    expand3x3: 1,
                },
                LayerSpec::Affine { channels: 2 },
                LayerSpec::GlobalAvgPool,
            ],
        };
        let mut w = ModelWeights::init(&spec, 0.0, &mut rng()).unwrap();
        w.layers[1] = LayerWeights::Affine(AffineWeights {
            scale: Array1::from(vec![3.0, 0.5]),
            shift: Array1::from(vec![-1.0, 2.0]),
        });
        let params = HeParams::toy(64, 3).unwrap();
        let plan = compile(&spec, &w, &params).unwrap();
        assert_eq!(plan.depth, 1);
        let sim = SimBackend::new(params, &[]).unwrap();
        let mut r = rng();
        let x = batch(&mut r, 4, spec.input);
        let got = infer_batch(&plan, &sim, &x, &mut r).unwrap();
        assert!(max_diff(&got, &model::logits(&spec, &w, &x).unwrap()) < 1e-9);
    }

    #[test]
    fn affine_on_raw_input_needs_its_own_level() {
        // input registers have no producer to absorb the map
        let spec = NetworkSpec {
            input: (2, 1, 1),
            num_classes: 2,
            layers: vec![LayerSpec::Affine { channels: 2 }, LayerSpec::GlobalAvgPool],
        };
        let w = ModelWeights {
            layers: vec![
                LayerWeights::Affine(AffineWeights {
                    scale: Array1::from(vec![2.0, -1.0]),
                    shift: Array1::from(vec![0.5, 0.0]),
                }),
                LayerWeights::None,
            ],
        };
        let params = HeParams::toy(64, 2).unwrap();
        let plan = compile(&spec, &w, &params).unwrap();
        assert_eq!(plan.depth, 1);
        assert_eq!(plan.instrs.len(), 2);
        let sim = SimBackend::new(params, &[]).unwrap();
        let x = Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, 4.0]).unwrap();
        let got = infer_batch(&plan, &sim, &x, &mut rng()).unwrap();
        assert!(max_diff(&got, &Array2::from_shape_vec((1, 2), vec![2.5, -4.0]).unwrap()) < 1e-9);
    }

    #[test]
    fn random_networks_match_plaintext_on_simulator() {
        let mut r = rng();
        let params = HeParams::desk();
        let sim = SimBackend::new(params.clone(), &[]).unwrap();
        for _ in 0..10 {
            let (spec, w) = model::random_toy_network(&mut r, (2, 4, 4), 3).unwrap();
            let (fs, fw) = model::fold_batchnorm(&spec, &w).unwrap();
            let plan = compile(&fs, &fw, &params).unwrap();
            assert_eq!(plan.depth, analytic_depth(&fs));
            let x = batch(&mut r, 5, spec.input);
            let got = infer_batch(&plan, &sim, &x, &mut r).unwrap();
            let want = model::logits(&spec, &w, &x).unwrap();
            assert!(max_diff(&got, &want) < 1e-9, "{}", spec.to_json());
        }
    }

    #[test]
    fn random_network_matches_plaintext_on_lattice_backend() {
        let mut r = rng();
        let he = CkksBackend::generate(HeParams::desk(), &[], &mut r).unwrap();
        let (spec, w) = model::random_toy_network(&mut r, (2, 4, 4), 3).unwrap();
        let (fs, fw) = model::fold_batchnorm(&spec, &w).unwrap();
        let plan = compile(&fs, &fw, he.params()).unwrap();
        let x = batch(&mut r, 8, spec.input);
        let got = infer_batch(&plan, &he, &x, &mut r).unwrap();
        let want = model::logits(&spec, &w, &x).unwrap();
        assert!(max_diff(&got, &want) < 1e-2, "{got:?} vs {want:?}");
    }

    #[test]
    fn drifted_input_is_reported() {
        let spec = pointwise(1, 2);
        let w = ModelWeights::init(&spec, 0.0, &mut rng()).unwrap();
        let params = HeParams::toy(64, 2).unwrap();
        let plan = compile(&spec, &w, &params).unwrap();
        let sim = SimBackend::new(params, &[]).unwrap();
        let ct = sim.encode_encrypt(&[1.0], &mut rng()).unwrap();
        let low = sim.mod_down_to(&ct, 1).unwrap();
        let input = PackedTensor {
            shape: (1, 1, 1),
            batch: 1,
            cells: vec![low],
        };
        assert!(matches!(execute(&plan, &sim, &input), Err(Error::PlanDrift { .. })));
    }

    #[test]
    fn channelwise_model_counts_rotations() {
        let spec = model::build_squeezenet_opt(
            10,
            (3, 32, 32),
            ActivationKind::Poly {
                granularity: Granularity::Element,
            },
        )
        .unwrap();
        let params = HeParams::large();
        let t = OpTimings {
            add: 1.0,
            cmult: 1.0,
            mult: 1.0,
            rot: 1.0,
            rescale: 1.0,
        };
        let e = estimate_cost(&spec, &params, 64, Layout::ElementWise, &t).unwrap();
        assert_eq!(e.counts.rot, 0);
        assert_eq!(e.depth, 18);
        let c1 = estimate_cost(&spec, &params, 1, Layout::ChannelWise, &t).unwrap();
        let c4 = estimate_cost(&spec, &params, 4, Layout::ChannelWise, &t).unwrap();
        assert!(c1.counts.rot > 0);
        assert_eq!(c4.counts.rot, 4 * c1.counts.rot);
        assert!((c4.amortized_s - c1.amortized_s).abs() < 1e-9);
        // element-wise cost does not grow with the batch
        let e1 = estimate_cost(&spec, &params, 1, Layout::ElementWise, &t).unwrap();
        assert_eq!(e1.counts, e.counts);
        assert!((e1.amortized_s - 64.0 * e.amortized_s).abs() < 1e-6 * e1.amortized_s);
    }
}
