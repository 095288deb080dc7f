//! Finite-difference gradient suites over every differentiable operation.
//!
//! Each op is checked at many random points. A point is one random instance
//! of the op's inputs and parameters; every coordinate of every parameter is
//! compared against a central difference. The spiking gate has surrogate
//! backward rules, so its in-band mismatches are reported separately as
//! expected rather than as failures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{grad_check, BackwardCtx, CoordCheck, GradCheckOptions, NodeId, ParamStore, Tape, TapeOp, Tensor};
use crate::encoding::{hash_encode, HashGrid, HashGridConfig};
use crate::error::Result;
use crate::field::{fd_gradient_on_tape, FieldConfig, FieldParams};
use crate::losses;
use crate::math::{Aabb, Vec3};
use crate::rendering::{ray_sum, render_on_tape, weights_on_tape, SampleBatch};
use crate::spiking::{fif_gate, window, GateOptions, InputGradRule};

/// Gradcheck run settings.
#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random points per op.
    pub points: usize,
    pub tol: f64,
    /// Op whose backward gets a deliberately wrong factor (harness self-test).
    pub fault: Option<String>,
    /// Restrict to these suites when set.
    pub suites: Option<Vec<String>>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            points: 100,
            tol: 1e-4,
            fault: None,
            suites: None,
        }
    }
}

/// Outcome for one op.
#[derive(Clone, Debug, Serialize)]
pub struct OpResult {
    pub suite: &'static str,
    pub op: &'static str,
    pub points: usize,
    pub coordinates: usize,
    /// Largest relative error over coordinates that are not surrogate sites.
    pub max_rel_err: f64,
    /// Coordinates whose mismatch is explained by the surrogate rule.
    pub surrogate_mismatches: usize,
    /// Points with at least one surrogate site.
    pub surrogate_points: usize,
    pub failed_points: usize,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.failed_points == 0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub seed: u64,
    pub ops: Vec<OpResult>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpResult::passed)
    }

    pub fn failed_ops(&self) -> Vec<&'static str> {
        self.ops.iter().filter(|o| !o.passed()).map(|o| o.op).collect()
    }

    /// Largest non-surrogate relative error per suite, in suite order.
    pub fn per_suite(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = Vec::new();
        for o in &self.ops {
            match out.iter_mut().find(|(s, _)| *s == o.suite) {
                Some((_, e)) => *e = e.max(o.max_rel_err),
                None => out.push((o.suite, o.max_rel_err)),
            }
        }
        out
    }
}

/// Identity forward whose backward is off by a factor.
struct FaultOp;

impl TapeOp for FaultOp {
    fn name(&self) -> &'static str {
        "injected_fault"
    }

    fn backward(&self, ctx: BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad_out.map(|g| 1.5 * g))]
    }
}

type Loss = Box<dyn Fn(&mut Tape<'_>) -> Result<NodeId>>;

/// Identifies coordinates whose mismatch is an expected surrogate effect.
type SurrogateFilter = Box<dyn Fn(&CoordCheck) -> bool>;

struct Instance {
    store: ParamStore,
    loss: Loss,
    eps: f64,
    surrogate: Option<SurrogateFilter>,
}

impl Instance {
    fn new(store: ParamStore, loss: Loss) -> Self {
        Self {
            store,
            loss,
            eps: 1e-5,
            surrogate: None,
        }
    }
}

/// Contracts `node` with fixed pseudo-random weights into a scalar, passing
/// through the fault op first when requested.
fn probe(tape: &mut Tape<'_>, node: NodeId, fault: bool) -> NodeId {
    let node = if fault {
        let v = tape.value(node).clone();
        tape.push_extern(Box::new(FaultOp), &[node], v)
    } else {
        node
    };
    let (r, c) = tape.value(node).shape();
    let w: Vec<f64> = (0..r * c).map(|i| (1.3 + 0.77 * i as f64).sin() + 0.25).collect();
    let wn = tape.constant(Tensor::new(r, c, w));
    tape.dot(node, wn)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Magnitudes in `[lo, hi)` with random signs.
fn signed(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

type Builder = fn(&mut ChaCha8Rng, bool) -> Instance;

struct Case {
    suite: &'static str,
    op: &'static str,
    build: Builder,
}

macro_rules! unary {
    ($name:ident, $gen:expr, |$t:ident, $x:ident| $body:expr) => {
        fn $name(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
            let mut s = ParamStore::new();
            let gen: fn(&mut ChaCha8Rng) -> Vec<f64> = $gen;
            let id = s.add("x", &[3, 4], gen(rng));
            Instance::new(
                s,
                Box::new(move |$t: &mut Tape<'_>| {
                    let $x = $t.param(id);
                    let y = $body;
                    Ok(probe($t, y, fault))
                }),
            )
        }
    };
}

unary!(op_scale, |r| uniform(r, 12, -2.0, 2.0), |t, x| t.scale(x, -1.7));
unary!(op_offset, |r| uniform(r, 12, -2.0, 2.0), |t, x| {
    let y = t.offset(x, 0.6);
    t.mul(y, y)
});
unary!(op_exp, |r| uniform(r, 12, -2.0, 2.0), |t, x| t.exp(x));
unary!(op_log, |r| uniform(r, 12, 0.2, 3.0), |t, x| t.log(x));
unary!(op_relu, |r| signed(r, 12, 0.05, 2.0), |t, x| t.relu(x));
unary!(op_softplus, |r| uniform(r, 12, -4.0, 4.0), |t, x| t.softplus(x));
unary!(op_sigmoid, |r| uniform(r, 12, -4.0, 4.0), |t, x| t.sigmoid(x));
unary!(op_abs, |r| signed(r, 12, 0.05, 2.0), |t, x| t.abs(x));
unary!(op_square, |r| uniform(r, 12, -2.0, 2.0), |t, x| t.square(x));
unary!(op_recip, |r| signed(r, 12, 0.3, 2.0), |t, x| t.recip(x));
unary!(
    op_clamp,
    |r| (0..12)
        .map(|i| match i % 3 {
            0 => r.gen_range(-2.0..-0.55),
            1 => r.gen_range(-0.45..0.45),
            _ => r.gen_range(0.55..2.0),
        })
        .collect(),
    |t, x| t.clamp(x, -0.5, 0.5)
);
unary!(op_sum, |r| uniform(r, 12, -2.0, 2.0), |t, x| {
    let y = t.square(x);
    t.sum(y)
});
unary!(op_mean, |r| uniform(r, 12, -2.0, 2.0), |t, x| {
    let y = t.square(x);
    t.mean(y)
});
unary!(op_row_norm, |r| signed(r, 12, 0.2, 2.0), |t, x| t.row_norm(x));
unary!(op_row_sum, |r| uniform(r, 12, -2.0, 2.0), |t, x| t.row_sum(x));
unary!(op_slice_cols, |r| uniform(r, 12, -2.0, 2.0), |t, x| {
    let y = t.slice_cols(x, 1, 2);
    t.square(y)
});
unary!(op_slice_rows, |r| uniform(r, 12, -2.0, 2.0), |t, x| {
    let y = t.slice_rows(x, 1, 2);
    t.square(y)
});

macro_rules! binary {
    ($name:ident, [$ra:expr, $ca:expr], [$rb:expr, $cb:expr], |$t:ident, $a:ident, $b:ident| $body:expr) => {
        fn $name(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
            let mut s = ParamStore::new();
            let ia = s.add("a", &[$ra, $ca], uniform(rng, $ra * $ca, -2.0, 2.0));
            let ib = s.add("b", &[$rb, $cb], uniform(rng, $rb * $cb, -2.0, 2.0));
            Instance::new(
                s,
                Box::new(move |$t: &mut Tape<'_>| {
                    let $a = $t.param(ia);
                    let $b = $t.param(ib);
                    let y = $body;
                    Ok(probe($t, y, fault))
                }),
            )
        }
    };
}

binary!(op_add, [3, 4], [3, 4], |t, a, b| {
    let y = t.add(a, b);
    t.square(y)
});
binary!(op_sub, [3, 4], [3, 4], |t, a, b| {
    let y = t.sub(a, b);
    t.square(y)
});
binary!(op_mul, [3, 4], [3, 4], |t, a, b| t.mul(a, b));
binary!(op_matmul, [3, 4], [4, 2], |t, a, b| t.matmul(a, b));
binary!(op_mul_column, [3, 4], [3, 1], |t, a, b| t.mul_column(a, b));
binary!(op_dot, [3, 4], [3, 4], |t, a, b| {
    let y = t.dot(a, b);
    t.square(y)
});
binary!(op_concat_cols, [3, 2], [3, 3], |t, a, b| {
    let y = t.concat_cols(&[a, b]);
    t.square(y)
});
binary!(op_concat_rows, [2, 3], [1, 3], |t, a, b| {
    let y = t.concat_rows(&[a, b]);
    t.square(y)
});

fn op_linear(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let mut s = ParamStore::new();
    let x = s.add("x", &[3, 4], uniform(rng, 12, -2.0, 2.0));
    let w = s.add("w", &[4, 2], uniform(rng, 8, -2.0, 2.0));
    let b = s.add("b", &[2], uniform(rng, 2, -2.0, 2.0));
    Instance::new(
        s,
        Box::new(move |t| {
            let (xn, wn, bn) = (t.param(x), t.param(w), t.param(b));
            let y = t.linear(xn, wn, bn);
            Ok(probe(t, y, fault))
        }),
    )
}

fn op_group_sum(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let mut s = ParamStore::new();
    let x = s.add("x", &[6, 2], uniform(rng, 12, -2.0, 2.0));
    Instance::new(
        s,
        Box::new(move |t| {
            let xn = t.param(x);
            let y = t.group_sum(xn, 3);
            let y = t.square(y);
            Ok(probe(t, y, fault))
        }),
    )
}

fn small_grid_config() -> HashGridConfig {
    HashGridConfig {
        levels: 3,
        log2_table_size: 5,
        features: 2,
        base_resolution: 2,
        max_resolution: 8,
    }
}

/// Random positions at least `margin` (in cell units) from every cell face
/// of every level, so central differences never straddle a face.
fn interior_points(rng: &mut ChaCha8Rng, grid: &HashGrid, n: usize, margin: f64) -> Vec<Vec3> {
    let frame = *grid.frame();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = [
            rng.gen_range(-0.9..0.9),
            rng.gen_range(-0.9..0.9),
            rng.gen_range(-0.9..0.9),
        ];
        let (u, _) = grid.normalize(p);
        let ok = grid.resolutions().iter().all(|&res| {
            u.iter().all(|&c| {
                let f = (c * res as f64).fract();
                f > margin && f < 1.0 - margin
            })
        });
        debug_assert!(frame.contains(p));
        if ok {
            out.push(p);
        }
    }
    out
}

fn op_hash_encode(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let grid = HashGrid::new(small_grid_config(), Aabb::cube(1.0)).expect("valid grid");
    let mut s = ParamStore::new();
    let table = s.add("table", &grid.table_shape(), uniform(rng, grid.table_len(), -1.0, 1.0));
    let pts = interior_points(rng, &grid, 4, 1e-3);
    let pos = s.add("x", &[4, 3], pts.iter().flatten().copied().collect());
    let mut inst = Instance::new(
        s,
        Box::new(move |t| {
            let p = t.param(pos);
            let e = hash_encode(t, &grid, table, p)?;
            Ok(probe(t, e, fault))
        }),
    );
    inst.eps = 1e-5;
    inst
}

fn small_field(rng: &mut ChaCha8Rng) -> FieldParams {
    let cfg = FieldConfig {
        hash: small_grid_config(),
        density_hidden: 4,
        density_layers: 1,
        geo_features: 3,
        color_hidden: 4,
        color_layers: 1,
        sh_degree: 2,
    };
    let mut f = FieldParams::new(cfg, Aabb::cube(1.0), rng).expect("valid field");
    for v in f.store_mut().values_mut() {
        *v = rng.gen_range(-0.8..0.8);
    }
    f
}

fn field_points(rng: &mut ChaCha8Rng, f: &FieldParams, n: usize) -> Vec<Vec3> {
    interior_points(rng, f.grid(), n, 1e-3)
}

fn op_density(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let f = small_field(rng);
    let pts = field_points(rng, &f, 3);
    let store = f.store().clone();
    Instance::new(
        store,
        Box::new(move |t| {
            let p = t.constant(Tensor::from_rows(&pts));
            let (s, g) = f.density_on_tape(t, p)?;
            let y = t.concat_cols(&[s, g]);
            Ok(probe(t, y, fault))
        }),
    )
}

fn op_color(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let f = small_field(rng);
    let pts = field_points(rng, &f, 3);
    let dirs: Vec<Vec3> = (0..3).map(|_| random_unit(rng)).collect();
    let sh = f.sh_rows(&dirs).expect("unit directions");
    let store = f.store().clone();
    Instance::new(
        store,
        Box::new(move |t| {
            let p = t.constant(Tensor::from_rows(&pts));
            let (_, g) = f.density_on_tape(t, p)?;
            let shn = t.constant(sh.clone());
            let c = f.color_on_tape(t, shn, g);
            Ok(probe(t, c, fault))
        }),
    )
}

fn op_fd_gradient(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let f = small_field(rng);
    // wide enough that the inner difference barely amplifies round-off
    let eps = 0.05;
    // probes ±eps must stay inside cells too
    let pts: Vec<Vec3> = (0..64)
        .map(|_| field_points(rng, &f, 1)[0])
        .filter(|p| {
            crate::field::fd_probes(*p, eps).iter().all(|q| {
                let (u, _) = f.grid().normalize(*q);
                f.grid().resolutions().iter().all(|&res| {
                    u.iter().all(|&c| {
                        let x = (c * res as f64).fract();
                        x > 1e-3 && x < 1.0 - 1e-3
                    })
                })
            })
        })
        .take(2)
        .collect();
    let store = f.store().clone();
    let inst = Instance::new(
        store,
        Box::new(move |t| {
            let g = fd_gradient_on_tape(t, &f, &pts, eps)?;
            Ok(probe(t, g, fault))
        }),
    );
    inst
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = crate::math::norm(v);
        if n > 0.1 && n <= 1.0 {
            return crate::math::scale(v, 1.0 / n);
        }
    }
}

/// A ragged batch of three rays, one of them empty.
fn random_batch(rng: &mut ChaCha8Rng) -> SampleBatch {
    let a = rng.gen_range(1..5);
    let b = rng.gen_range(1..5);
    let n = a + b;
    SampleBatch {
        dirs: vec![[0.0, 0.0, 1.0]; 3],
        offsets: vec![0, a, a, n],
        t: vec![0.0; n],
        positions: vec![[0.0; 3]; n],
        deltas: uniform(rng, n, 0.02, 0.5),
        ..Default::default()
    }
}

fn op_weights(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let batch = random_batch(rng);
    let mut s = ParamStore::new();
    let sig = s.add("sigma", &[batch.n_samples()], uniform(rng, batch.n_samples(), 0.0, 5.0));
    Instance::new(
        s,
        Box::new(move |t| {
            let sn = t.param_column(sig);
            let w = weights_on_tape(t, &batch, sn)?;
            Ok(probe(t, w, fault))
        }),
    )
}

fn op_ray_sum(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let batch = random_batch(rng);
    let mut s = ParamStore::new();
    let n = batch.n_samples();
    let x = s.add("x", &[n, 2], uniform(rng, 2 * n, -2.0, 2.0));
    Instance::new(
        s,
        Box::new(move |t| {
            let xn = t.param(x);
            let y = ray_sum(t, &batch, xn);
            let y = t.square(y);
            Ok(probe(t, y, fault))
        }),
    )
}

fn op_render(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let batch = random_batch(rng);
    let n = batch.n_samples();
    let mut s = ParamStore::new();
    let sig = s.add("sigma", &[n], uniform(rng, n, 0.0, 5.0));
    let col = s.add("color", &[n, 3], uniform(rng, 3 * n, 0.0, 1.0));
    let bg = [rng.gen(), rng.gen(), rng.gen()];
    Instance::new(
        s,
        Box::new(move |t| {
            let sn = t.param_column(sig);
            let cn = t.param(col);
            let r = render_on_tape(t, &batch, sn, cn, bg)?;
            let y = t.concat_cols(&[r.rgb, r.opacity]);
            let a = probe(t, y, fault);
            let w = t.square(r.weights);
            let b = t.sum(w);
            Ok(t.add(a, b))
        }),
    )
}

fn op_color_loss(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let mut s = ParamStore::new();
    let target: Vec<f64> = uniform(rng, 12, 0.0, 1.0);
    // keep |pred − target| away from zero so L1 is smooth
    let pred: Vec<f64> = target.iter().map(|&v| v + signed(rng, 1, 0.05, 0.5)[0]).collect();
    let p = s.add("rgb", &[4, 3], pred);
    let tgt = Tensor::new(4, 3, target);
    Instance::new(
        s,
        Box::new(move |t| {
            let pn = t.param(p);
            let pn = if fault {
                let v = t.value(pn).clone();
                t.push_extern(Box::new(FaultOp), &[pn], v)
            } else {
                pn
            };
            Ok(losses::color_loss_on_tape(t, pn, &tgt))
        }),
    )
}

fn op_threshold_loss(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let mut s = ParamStore::new();
    let th = s.add("threshold", &[], vec![rng.gen_range(0.0..5.0)]);
    let lambda = rng.gen_range(0.01..1.0);
    Instance::new(
        s,
        Box::new(move |t| {
            let n = t.param(th);
            let l = losses::threshold_loss_on_tape(t, n, lambda);
            Ok(probe(t, l, fault))
        }),
    )
}

fn op_orientation_loss(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let n = 6;
    let dirs: Vec<Vec3> = (0..n).map(|_| random_unit(rng)).collect();
    // gradients clearly on one side of the relu kink
    let grads: Vec<f64> = dirs
        .iter()
        .flat_map(|d| {
            let mut g = random_unit(rng);
            let c = crate::math::dot(g, *d);
            if c.abs() < 0.1 {
                g = crate::math::add(g, crate::math::scale(*d, 0.5));
            }
            crate::math::scale(g, rng.gen_range(0.5..2.0))
        })
        .collect();
    let valid: Vec<bool> = (0..n).map(|i| i != 2).collect();
    let mut s = ParamStore::new();
    let w = s.add("weights", &[n], uniform(rng, n, 0.0, 1.0));
    let g = s.add("grads", &[n, 3], grads);
    Instance::new(
        s,
        Box::new(move |t| {
            let wn = t.param_column(w);
            let gn = t.param(g);
            let l = losses::orientation_loss_on_tape(t, wn, gn, &dirs, &valid, 3);
            Ok(probe(t, l, fault))
        }),
    )
}

fn op_eikonal_loss(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let mut s = ParamStore::new();
    let g = s.add("grads", &[5, 3], signed(rng, 15, 0.1, 2.0));
    Instance::new(
        s,
        Box::new(move |t| {
            let gn = t.param(g);
            let l = losses::eikonal_loss_on_tape(t, gn);
            Ok(probe(t, l, fault))
        }),
    )
}

fn op_mask_loss(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    let mut s = ParamStore::new();
    let o = s.add("opacity", &[6], uniform(rng, 6, 0.02, 0.98));
    let mask: Vec<f64> = (0..6).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
    Instance::new(
        s,
        Box::new(move |t| {
            let on = t.param_column(o);
            let l = losses::mask_loss_on_tape(t, on, &mask);
            Ok(probe(t, l, fault))
        }),
    )
}

fn gate_instance(rng: &mut ChaCha8Rng, fault: bool, rule: InputGradRule) -> Instance {
    let (k, r): (f64, f64) = (rng.gen_range(0.2..1.0), rng.gen_range(0.5..2.0));
    let th: f64 = rng.gen_range(0.2..2.0);
    // densities well clear of the threshold itself, so the forward jump is
    // never straddled by the difference step
    let sig: Vec<f64> = (0..8)
        .map(|_| loop {
            let s: f64 = rng.gen_range(0.0..3.5);
            if (s - th).abs() > 1e-3 {
                break s;
            }
        })
        .collect();
    let mut st = ParamStore::new();
    let sid = st.add("sigma", &[8], sig.clone());
    let tid = st.add("threshold", &[], vec![th]);
    let in_band: Vec<bool> = sig.iter().map(|&s| s != 0.0 && window(s, th, k) > 0.0).collect();
    let any_band = in_band.iter().any(|&b| b);
    let filter: SurrogateFilter = Box::new(move |c: &CoordCheck| match c.param.as_str() {
        "threshold" => any_band,
        _ => in_band[c.index],
    });
    let opts = GateOptions {
        input_rule: rule,
        threshold_grad: true,
    };
    let mut inst = Instance::new(
        st,
        Box::new(move |t| {
            let s = t.param_column(sid);
            let th = t.param(tid);
            let g = fif_gate(t, s, th, k, r, opts)?;
            let g = t.square(g);
            Ok(probe(t, g, fault))
        }),
    );
    inst.eps = 1e-7;
    inst.surrogate = Some(filter);
    inst
}

fn op_fif_gate(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    gate_instance(rng, fault, InputGradRule::Heaviside)
}

fn op_fif_gate_full(rng: &mut ChaCha8Rng, fault: bool) -> Instance {
    gate_instance(rng, fault, InputGradRule::Full)
}

const CASES: &[Case] = &[
    Case { suite: "diffcore", op: "add", build: op_add },
    Case { suite: "diffcore", op: "sub", build: op_sub },
    Case { suite: "diffcore", op: "mul", build: op_mul },
    Case { suite: "diffcore", op: "scale", build: op_scale },
    Case { suite: "diffcore", op: "offset", build: op_offset },
    Case { suite: "diffcore", op: "exp", build: op_exp },
    Case { suite: "diffcore", op: "log", build: op_log },
    Case { suite: "diffcore", op: "relu", build: op_relu },
    Case { suite: "diffcore", op: "softplus", build: op_softplus },
    Case { suite: "diffcore", op: "sigmoid", build: op_sigmoid },
    Case { suite: "diffcore", op: "abs", build: op_abs },
    Case { suite: "diffcore", op: "square", build: op_square },
    Case { suite: "diffcore", op: "recip", build: op_recip },
    Case { suite: "diffcore", op: "clamp", build: op_clamp },
    Case { suite: "diffcore", op: "matmul", build: op_matmul },
    Case { suite: "diffcore", op: "linear", build: op_linear },
    Case { suite: "diffcore", op: "mul_column", build: op_mul_column },
    Case { suite: "diffcore", op: "sum", build: op_sum },
    Case { suite: "diffcore", op: "mean", build: op_mean },
    Case { suite: "diffcore", op: "dot", build: op_dot },
    Case { suite: "diffcore", op: "row_norm", build: op_row_norm },
    Case { suite: "diffcore", op: "row_sum", build: op_row_sum },
    Case { suite: "diffcore", op: "group_sum", build: op_group_sum },
    Case { suite: "diffcore", op: "slice_cols", build: op_slice_cols },
    Case { suite: "diffcore", op: "slice_rows", build: op_slice_rows },
    Case { suite: "diffcore", op: "concat_cols", build: op_concat_cols },
    Case { suite: "diffcore", op: "concat_rows", build: op_concat_rows },
    Case { suite: "encoding", op: "hash_encode", build: op_hash_encode },
    Case { suite: "field", op: "density", build: op_density },
    Case { suite: "field", op: "color", build: op_color },
    Case { suite: "field", op: "fd_gradient", build: op_fd_gradient },
    Case { suite: "rendering", op: "composite_weights", build: op_weights },
    Case { suite: "rendering", op: "ray_sum", build: op_ray_sum },
    Case { suite: "rendering", op: "render", build: op_render },
    Case { suite: "losses", op: "color_loss", build: op_color_loss },
    Case { suite: "losses", op: "threshold_loss", build: op_threshold_loss },
    Case { suite: "losses", op: "orientation_loss", build: op_orientation_loss },
    Case { suite: "losses", op: "eikonal_loss", build: op_eikonal_loss },
    Case { suite: "losses", op: "mask_loss", build: op_mask_loss },
    Case { suite: "spiking", op: "fif_gate", build: op_fif_gate },
    Case { suite: "spiking", op: "fif_gate_full", build: op_fif_gate_full },
];

/// Names of every checked op, in run order.
pub fn op_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.op).collect()
}

fn check_case(case: &Case, cfg: &GradcheckConfig) -> Result<OpResult> {
    // one stream per op, so restricting suites leaves the others unchanged
    let tag = case.op.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ tag);
    let fault = cfg.fault.as_deref() == Some(case.op);
    let mut out = OpResult {
        suite: case.suite,
        op: case.op,
        points: cfg.points,
        coordinates: 0,
        max_rel_err: 0.0,
        surrogate_mismatches: 0,
        surrogate_points: 0,
        failed_points: 0,
    };
    for _ in 0..cfg.points {
        let inst = (case.build)(&mut rng, fault);
        let opts = GradCheckOptions {
            eps: inst.eps,
            tol: cfg.tol,
            ..Default::default()
        };
        let rep = grad_check(&inst.store, &opts, |t| (inst.loss)(t))?;
        out.coordinates += rep.coords.len();
        let mut failed = rep.non_finite > 0;
        let mut surrogate = false;
        for c in &rep.coords {
            let expected = inst.surrogate.as_ref().is_some_and(|f| f(c));
            if expected {
                surrogate = true;
                if c.rel_err > cfg.tol {
                    out.surrogate_mismatches += 1;
                }
                continue;
            }
            if !(c.rel_err <= cfg.tol) {
                failed = true;
            }
            if c.rel_err.is_finite() {
                out.max_rel_err = out.max_rel_err.max(c.rel_err);
            }
        }
        out.surrogate_points += usize::from(surrogate);
        out.failed_points += usize::from(failed);
    }
    Ok(out)
}

/// Runs every selected suite.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckSummary> {
    let mut ops = Vec::new();
    for case in CASES {
        if let Some(s) = &cfg.suites {
            if !s.iter().any(|n| n == case.suite) {
                continue;
            }
        }
        ops.push(check_case(case, cfg)?);
    }
    Ok(GradcheckSummary { seed: cfg.seed, ops })
}
