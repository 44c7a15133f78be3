//! No-U-Turn sampler: leapfrog integration, multinomial tree doubling,
//! dual-averaging step-size adaptation, and windowed diagonal mass-matrix
//! estimation, with deterministic multi-chain orchestration.

use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{BscError, Result};
use crate::model::ModelContext;

/// Hamiltonian error beyond which a trajectory is declared divergent.
const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Dual-averaging constants (reference values).
const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

/// Version tag of the parameter packing order written into trace dumps.
pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Anything the sampler can explore: a log-density with gradient on an
/// unconstrained space.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Write the gradient into `grad` and return the log-density.
    /// A non-finite return is treated as a divergence signal, not an error.
    fn logp_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;

    /// Seeded starting point before jitter retries.
    fn initial_position(&self, seed: u64) -> Vec<f64>;
}

impl Target for ModelContext {
    fn dim(&self) -> usize {
        ModelContext::dim(self)
    }

    fn logp_and_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        if position.iter().any(|x| !x.is_finite()) {
            return f64::NEG_INFINITY;
        }
        ModelContext::logp_and_grad(self, position, grad)
    }

    fn initial_position(&self, seed: u64) -> Vec<f64> {
        self.initial_point(seed)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerSettings {
    pub chains: usize,
    pub tune: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_treedepth: usize,
    pub seed: u64,
}

impl Default for SamplerSettings {
    /// The reference protocol: 2 chains, 5000 warmup, 25000 draws,
    /// target acceptance 0.9, maximum tree depth 12.
    fn default() -> Self {
        Self {
            chains: 2,
            tune: 5000,
            draws: 25_000,
            target_accept: 0.9,
            max_treedepth: 12,
            seed: 42,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 1 {
            return Err(BscError::InvalidArgument("chains must be >= 1".into()));
        }
        if self.draws < 1 {
            return Err(BscError::InvalidArgument("draws must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(BscError::InvalidArgument(
                "target_accept must be in (0,1)".into(),
            ));
        }
        if self.max_treedepth < 1 {
            return Err(BscError::InvalidArgument("max_treedepth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-chain sampling record.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    /// draws x dim, row per kept iteration.
    pub draws: Vec<Vec<f64>>,
    /// Iteration indices (within the kept draws) that diverged.
    pub divergences: Vec<usize>,
    pub tree_depths: Vec<u32>,
    pub accept_stat: Vec<f64>,
    pub energy: Vec<f64>,
    /// Final adapted step size.
    pub step_size: f64,
    /// Final inverse mass diagonal.
    pub inv_mass_diag: Vec<f64>,
    /// Iterations that hit max_treedepth.
    pub treedepth_saturations: usize,
}

/// Multi-chain trace.
#[derive(Debug, Clone)]
pub struct Trace {
    pub chains: Vec<ChainTrace>,
    pub dim: usize,
}

impl Trace {
    pub fn n_draws_total(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn n_divergences(&self) -> usize {
        self.chains.iter().map(|c| c.divergences.len()).sum()
    }

    /// All kept draws of one coordinate, chain by chain.
    pub fn coordinate(&self, index: usize) -> Vec<f64> {
        self.chains
            .iter()
            .flat_map(|c| c.draws.iter().map(move |d| d[index]))
            .collect()
    }

    /// Per-chain views of one coordinate.
    pub fn coordinate_by_chain(&self, index: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d[index]).collect())
            .collect()
    }

    /// Binary dump: magic, format version, shapes, then row-major draws per
    /// chain, then per-chain step size.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| BscError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e: std::io::Error| BscError::Io {
            path: path.display().to_string(),
            source: e,
        };
        w.write_all(b"BSCTRACE").map_err(io)?;
        w.write_u32::<LittleEndian>(TRACE_FORMAT_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(self.chains.len() as u32).map_err(io)?;
        w.write_u64::<LittleEndian>(self.chains.first().map_or(0, |c| c.draws.len()) as u64)
            .map_err(io)?;
        w.write_u64::<LittleEndian>(self.dim as u64).map_err(io)?;
        for chain in &self.chains {
            for draw in &chain.draws {
                for &x in draw {
                    w.write_f64::<LittleEndian>(x).map_err(io)?;
                }
            }
        }
        for chain in &self.chains {
            w.write_f64::<LittleEndian>(chain.step_size).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Trace> {
        let file = std::fs::File::open(path).map_err(|e| BscError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut r = std::io::BufReader::new(file);
        let io = |e: std::io::Error| BscError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != b"BSCTRACE" {
            return Err(BscError::InvalidArgument("not a trace file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != TRACE_FORMAT_VERSION {
            return Err(BscError::InvalidArgument(format!(
                "unsupported trace format version {}",
                version
            )));
        }
        let n_chains = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let n_draws = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let dim = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut chains = Vec::with_capacity(n_chains);
        for _ in 0..n_chains {
            let mut draws = Vec::with_capacity(n_draws);
            for _ in 0..n_draws {
                let mut row = vec![0.0; dim];
                for x in row.iter_mut() {
                    *x = r.read_f64::<LittleEndian>().map_err(io)?;
                }
                draws.push(row);
            }
            chains.push(ChainTrace {
                draws,
                divergences: vec![],
                tree_depths: vec![],
                accept_stat: vec![],
                energy: vec![],
                step_size: f64::NAN,
                inv_mass_diag: vec![],
                treedepth_saturations: 0,
            });
        }
        for chain in chains.iter_mut() {
            chain.step_size = r.read_f64::<LittleEndian>().map_err(io)?;
        }
        Ok(Trace { chains, dim })
    }
}

/// Run all chains. Chains execute in parallel but merge by index, so the
/// result is a pure function of (target, settings).
pub fn sample<T: Target>(target: &T, settings: &SamplerSettings) -> Result<Trace> {
    settings.validate()?;
    if target.dim() == 0 {
        return Err(BscError::InvalidArgument("dim must be >= 1".into()));
    }
    let chains: Vec<Result<ChainTrace>> = (0..settings.chains)
        .into_par_iter()
        .map(|chain_idx| run_chain(target, settings, chain_idx))
        .collect();
    let mut out = Vec::with_capacity(settings.chains);
    for c in chains {
        out.push(c?);
    }
    Ok(Trace {
        chains: out,
        dim: target.dim(),
    })
}

fn chain_seed(seed: u64, chain_idx: usize) -> u64 {
    seed.wrapping_add((chain_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(pi, im)| pi * pi * im).sum::<f64>()
}

/// One symplectic leapfrog step. Returns None when the gradient or density
/// becomes non-finite (a divergence signal).
fn leapfrog_step<T: Target>(
    target: &T,
    state: &State,
    eps: f64,
    inv_mass: &[f64],
) -> Option<State> {
    let n = state.q.len();
    let mut p = state.p.clone();
    for i in 0..n {
        p[i] += 0.5 * eps * state.grad[i];
    }
    let mut q = state.q.clone();
    for i in 0..n {
        q[i] += eps * inv_mass[i] * p[i];
    }
    let mut grad = vec![0.0; n];
    let logp = target.logp_and_grad(&q, &mut grad);
    if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return None;
    }
    for i in 0..n {
        p[i] += 0.5 * eps * grad[i];
    }
    Some(State { q, p, grad, logp })
}

/// Public single-step integrator, exposed for direct testing. `eps` may be
/// signed; a zero step returns the input unchanged.
pub fn leapfrog<T: Target>(
    target: &T,
    q: &[f64],
    p: &[f64],
    eps: f64,
    inv_mass: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut grad = vec![0.0; q.len()];
    let logp = target.logp_and_grad(q, &mut grad);
    if !logp.is_finite() {
        return None;
    }
    let state = State {
        q: q.to_vec(),
        p: p.to_vec(),
        grad,
        logp,
    };
    leapfrog_step(target, &state, eps, inv_mass).map(|s| (s.q, s.p))
}

struct Tree {
    // trajectory endpoints
    minus: State,
    plus: State,
    // multinomial proposal
    prop_q: Vec<f64>,
    prop_grad: Vec<f64>,
    prop_logp: f64,
    p_sum: Vec<f64>,
    log_sum_weight: f64,
    sum_accept: f64,
    n_leapfrog: usize,
    diverged: bool,
    turning: bool,
}

fn is_turning(p_sum: &[f64], p_minus: &[f64], p_plus: &[f64], inv_mass: &[f64]) -> bool {
    let dot_minus: f64 = p_sum
        .iter()
        .zip(p_minus)
        .zip(inv_mass)
        .map(|((s, p), im)| s * p * im)
        .sum();
    let dot_plus: f64 = p_sum
        .iter()
        .zip(p_plus)
        .zip(inv_mass)
        .map(|((s, p), im)| s * p * im)
        .sum();
    dot_minus <= 0.0 || dot_plus <= 0.0
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[allow(clippy::too_many_arguments)]
fn build_tree<T: Target>(
    target: &T,
    depth: usize,
    from: &State,
    direction: f64,
    eps: f64,
    inv_mass: &[f64],
    h0: f64,
    rng: &mut ChaCha8Rng,
) -> Tree {
    if depth == 0 {
        let stepped = leapfrog_step(target, from, direction * eps, inv_mass);
        return match stepped {
            Some(s) => {
                let h = -s.logp + kinetic(&s.p, inv_mass);
                let delta_h = h - h0;
                let diverged = !delta_h.is_finite() || delta_h > DIVERGENCE_THRESHOLD;
                let log_weight = if diverged { f64::NEG_INFINITY } else { -delta_h };
                let accept = (-delta_h).exp().min(1.0);
                let accept = if accept.is_finite() { accept } else { 0.0 };
                Tree {
                    prop_q: s.q.clone(),
                    prop_grad: s.grad.clone(),
                    prop_logp: s.logp,
                    p_sum: s.p.clone(),
                    minus: State {
                        q: s.q.clone(),
                        p: s.p.clone(),
                        grad: s.grad.clone(),
                        logp: s.logp,
                    },
                    plus: s,
                    log_sum_weight: log_weight,
                    sum_accept: accept,
                    n_leapfrog: 1,
                    diverged,
                    turning: false,
                }
            }
            None => Tree {
                minus: clone_state(from),
                plus: clone_state(from),
                prop_q: from.q.clone(),
                prop_grad: from.grad.clone(),
                prop_logp: from.logp,
                p_sum: from.p.clone(),
                log_sum_weight: f64::NEG_INFINITY,
                sum_accept: 0.0,
                n_leapfrog: 1,
                diverged: true,
                turning: false,
            },
        };
    }

    let mut first = build_tree(target, depth - 1, from, direction, eps, inv_mass, h0, rng);
    if first.diverged || first.turning {
        return first;
    }
    let outer = if direction > 0.0 { &first.plus } else { &first.minus };
    let second = build_tree(target, depth - 1, outer, direction, eps, inv_mass, h0, rng);

    let mut tree = Tree {
        minus: if direction > 0.0 {
            clone_state(&first.minus)
        } else {
            clone_state(&second.minus)
        },
        plus: if direction > 0.0 {
            clone_state(&second.plus)
        } else {
            clone_state(&first.plus)
        },
        prop_q: Vec::new(),
        prop_grad: Vec::new(),
        prop_logp: 0.0,
        p_sum: first
            .p_sum
            .iter()
            .zip(&second.p_sum)
            .map(|(a, b)| a + b)
            .collect(),
        log_sum_weight: log_add_exp(first.log_sum_weight, second.log_sum_weight),
        sum_accept: first.sum_accept + second.sum_accept,
        n_leapfrog: first.n_leapfrog + second.n_leapfrog,
        diverged: second.diverged,
        turning: second.turning,
    };
    if tree.diverged || tree.turning {
        // proposal irrelevant, tree will be discarded
        tree.prop_q = std::mem::take(&mut first.prop_q);
        tree.prop_grad = std::mem::take(&mut first.prop_grad);
        tree.prop_logp = first.prop_logp;
        return tree;
    }
    // multinomial choice between subtrees
    let p_second = (second.log_sum_weight - tree.log_sum_weight).exp();
    if rng.random::<f64>() < p_second {
        tree.prop_q = second.prop_q;
        tree.prop_grad = second.prop_grad;
        tree.prop_logp = second.prop_logp;
    } else {
        tree.prop_q = std::mem::take(&mut first.prop_q);
        tree.prop_grad = std::mem::take(&mut first.prop_grad);
        tree.prop_logp = first.prop_logp;
    }
    tree.turning = is_turning(&tree.p_sum, &tree.minus.p, &tree.plus.p, inv_mass);
    tree
}

fn clone_state(s: &State) -> State {
    State {
        q: s.q.clone(),
        p: s.p.clone(),
        grad: s.grad.clone(),
        logp: s.logp,
    }
}

struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    count: f64,
    target: f64,
}

impl DualAveraging {
    fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            count: 0.0,
            target,
        }
    }

    fn update(&mut self, accept_prob: f64) {
        self.count += 1.0;
        let w = 1.0 / (self.count + DA_T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - self.count.sqrt() / DA_GAMMA * self.h_bar;
        let m = self.count.powf(-DA_KAPPA);
        self.log_eps_bar = m * self.log_eps + (1.0 - m) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn adapted(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Regularized variance estimate, shrunk toward unit scale.
    fn variance(&self) -> Option<Vec<f64>> {
        if self.n < 3 {
            return None;
        }
        let n = self.n as f64;
        Some(
            self.m2
                .iter()
                .map(|m2| (n / (n + 5.0)) * (m2 / (n - 1.0)) + 1e-3 * (5.0 / (n + 5.0)))
                .collect(),
        )
    }
}

/// Warmup phases: leading and trailing step-size-only buffers around
/// doubling covariance windows.
fn window_ends(tune: usize) -> Vec<usize> {
    if tune == 0 {
        return vec![];
    }
    let init_buffer = ((tune as f64) * 0.15).round() as usize;
    let term_buffer = ((tune as f64) * 0.10).round() as usize;
    let mut ends = Vec::new();
    if tune <= init_buffer + term_buffer + 25 {
        return vec![tune.saturating_sub(term_buffer).max(1)];
    }
    let mut size = 25usize;
    let mut pos = init_buffer;
    loop {
        let end = pos + size;
        if end + term_buffer + 2 * size >= tune {
            ends.push(tune - term_buffer);
            break;
        }
        ends.push(end);
        pos = end;
        size *= 2;
    }
    ends
}

fn find_initial_eps<T: Target>(
    target: &T,
    state: &State,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut s = clone_state(state);
    for i in 0..s.p.len() {
        s.p[i] = normal.sample(rng) / inv_mass[i].sqrt();
    }
    let h0 = -s.logp + kinetic(&s.p, inv_mass);
    let mut eps = 1.0;
    let delta_h = |eps: f64, s: &State| -> f64 {
        match leapfrog_step(target, s, eps, inv_mass) {
            Some(n) => h0 - (-n.logp + kinetic(&n.p, inv_mass)),
            None => f64::NEG_INFINITY,
        }
    };
    let mut d = delta_h(eps, &s);
    let go_up = d > (0.5f64).ln();
    for _ in 0..50 {
        if go_up {
            if d <= (0.5f64).ln() {
                break;
            }
            eps *= 2.0;
        } else {
            if d > (0.5f64).ln() {
                break;
            }
            eps *= 0.5;
        }
        d = delta_h(eps, &s);
        if !(1e-10..=1e7).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-10, 1e7)
}

fn run_chain<T: Target>(
    target: &T,
    settings: &SamplerSettings,
    chain_idx: usize,
) -> Result<ChainTrace> {
    let dim = target.dim();
    let seed = chain_seed(settings.seed, chain_idx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();

    // initialization with jitter retries
    let mut state = None;
    for retry in 0..100u64 {
        let q = target.initial_position(seed.wrapping_add(retry));
        let mut grad = vec![0.0; dim];
        let logp = target.logp_and_grad(&q, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            state = Some(State {
                q,
                p: vec![0.0; dim],
                grad,
                logp,
            });
            break;
        }
    }
    let mut state = state.ok_or_else(|| {
        BscError::Sampler("non-finite log-density at initialization after 100 retries".into())
    })?;

    let mut inv_mass = vec![1.0; dim];
    let mut eps = find_initial_eps(target, &state, &inv_mass, &mut rng);
    let mut da = DualAveraging::new(eps, settings.target_accept);
    let ends = window_ends(settings.tune);
    let mut welford = Welford::new(dim);
    let mut window_cursor = 0usize;

    let mut warmup_divergences = 0usize;
    let mut chain = ChainTrace {
        draws: Vec::with_capacity(settings.draws),
        divergences: vec![],
        tree_depths: Vec::with_capacity(settings.draws),
        accept_stat: Vec::with_capacity(settings.draws),
        energy: Vec::with_capacity(settings.draws),
        step_size: eps,
        inv_mass_diag: inv_mass.clone(),
        treedepth_saturations: 0,
    };

    let total = settings.tune + settings.draws;
    for iter in 0..total {
        let warming = iter < settings.tune;

        // fresh momentum
        for i in 0..dim {
            state.p[i] = normal.sample(&mut rng) / inv_mass[i].sqrt();
        }
        let h0 = -state.logp + kinetic(&state.p, &inv_mass);

        let mut tree_log_sum_weight = 0.0; // initial point has weight exp(0)
        let mut p_sum = state.p.clone();
        let mut minus = clone_state(&state);
        let mut plus = clone_state(&state);
        let mut prop_q = state.q.clone();
        let mut prop_grad = state.grad.clone();
        let mut prop_logp = state.logp;
        let mut depth = 0usize;
        let mut sum_accept = 0.0;
        let mut n_leapfrog = 0usize;
        let mut diverged = false;

        while depth < settings.max_treedepth {
            let direction: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let from = if direction > 0.0 { &plus } else { &minus };
            let subtree = build_tree(
                target, depth, from, direction, eps, &inv_mass, h0, &mut rng,
            );
            sum_accept += subtree.sum_accept;
            n_leapfrog += subtree.n_leapfrog;
            if subtree.diverged {
                diverged = true;
                break;
            }
            if subtree.turning {
                break;
            }
            // biased progressive sampling toward the new subtree
            let accept_new = (subtree.log_sum_weight - tree_log_sum_weight).exp().min(1.0);
            if rng.random::<f64>() < accept_new {
                prop_q = subtree.prop_q;
                prop_grad = subtree.prop_grad;
                prop_logp = subtree.prop_logp;
            }
            tree_log_sum_weight = log_add_exp(tree_log_sum_weight, subtree.log_sum_weight);
            if direction > 0.0 {
                plus = subtree.plus;
            } else {
                minus = subtree.minus;
            }
            for i in 0..dim {
                p_sum[i] += subtree.p_sum[i];
            }
            depth += 1;
            if is_turning(&p_sum, &minus.p, &plus.p, &inv_mass) {
                break;
            }
        }

        state.q = prop_q;
        state.grad = prop_grad;
        state.logp = prop_logp;
        let accept_stat = if n_leapfrog > 0 {
            sum_accept / n_leapfrog as f64
        } else {
            0.0
        };

        if warming {
            if diverged {
                warmup_divergences += 1;
            }
            da.update(accept_stat);
            eps = da.current();
            // mass-matrix windows
            if window_cursor < ends.len() {
                let window_start = if window_cursor == 0 {
                    ((settings.tune as f64) * 0.15).round() as usize
                } else {
                    ends[window_cursor - 1]
                };
                if iter >= window_start {
                    welford.push(&state.q);
                }
                if iter + 1 == ends[window_cursor] {
                    if let Some(var) = welford.variance() {
                        inv_mass = var;
                    }
                    welford = Welford::new(dim);
                    window_cursor += 1;
                    // re-anchor step-size adaptation on the new metric
                    eps = find_initial_eps(target, &state, &inv_mass, &mut rng);
                    da = DualAveraging::new(eps, settings.target_accept);
                }
            }
            if iter + 1 == settings.tune {
                if warmup_divergences == settings.tune {
                    return Err(BscError::Sampler(
                        "all warmup iterations diverged".into(),
                    ));
                }
                eps = da.adapted();
            }
        } else {
            let keep_idx = iter - settings.tune;
            if diverged {
                chain.divergences.push(keep_idx);
            }
            if depth == settings.max_treedepth {
                chain.treedepth_saturations += 1;
            }
            chain.draws.push(state.q.clone());
            chain.tree_depths.push(depth.max(1) as u32);
            chain.accept_stat.push(accept_stat);
            chain.energy.push(h0);
        }
    }

    chain.step_size = eps;
    chain.inv_mass_diag = inv_mass;
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{Corr2d, StdNormal};

    #[test]
    fn leapfrog_zero_step_is_identity() {
        let t = StdNormal(3);
        let q = vec![0.3, -0.5, 1.0];
        let p = vec![1.0, 0.2, -0.7];
        let (q2, p2) = leapfrog(&t, &q, &p, 0.0, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(q2, q);
        assert_eq!(p2, p);
    }

    #[test]
    fn leapfrog_reversibility() {
        let t = StdNormal(3);
        let q = vec![0.3, -0.5, 1.0];
        let p = vec![1.0, 0.2, -0.7];
        let inv_mass = [0.7, 1.3, 1.0];
        let (q2, p2) = leapfrog(&t, &q, &p, 0.05, &inv_mass).unwrap();
        let p2_neg: Vec<f64> = p2.iter().map(|x| -x).collect();
        let (q3, p3) = leapfrog(&t, &q2, &p2_neg, 0.05, &inv_mass).unwrap();
        for i in 0..3 {
            assert!((q3[i] - q[i]).abs() < 1e-10);
            assert!((p3[i] + p[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn leapfrog_energy_oscillates_on_quadratic() {
        let t = StdNormal(1);
        let inv_mass = [1.0];
        let mut q = vec![1.0];
        let mut p = vec![0.0];
        let eps = 0.1;
        let mut energies = Vec::new();
        for _ in 0..100 {
            let (q2, p2) = leapfrog(&t, &q, &p, eps, &inv_mass).unwrap();
            q = q2;
            p = p2;
            energies.push(0.5 * q[0] * q[0] + 0.5 * p[0] * p[0]);
        }
        let min = energies.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // bounded drift, not monotone
        assert!(max - min < 0.01);
        let increasing = energies.windows(2).all(|w| w[1] >= w[0]);
        let decreasing = energies.windows(2).all(|w| w[1] <= w[0]);
        assert!(!increasing && !decreasing);
    }

    #[test]
    fn determinism_bit_identical() {
        let t = StdNormal(4);
        let s = SamplerSettings {
            chains: 2,
            tune: 200,
            draws: 100,
            target_accept: 0.8,
            max_treedepth: 10,
            seed: 7,
        };
        let a = sample(&t, &s).unwrap();
        let b = sample(&t, &s).unwrap();
        for (ca, cb) in a.chains.iter().zip(&b.chains) {
            assert_eq!(ca.draws, cb.draws);
            assert_eq!(ca.divergences, cb.divergences);
        }
    }

    #[test]
    fn treedepth_cap_respected() {
        let t = StdNormal(4);
        let s = SamplerSettings {
            chains: 1,
            tune: 100,
            draws: 100,
            target_accept: 0.8,
            max_treedepth: 1,
            seed: 3,
        };
        let trace = sample(&t, &s).unwrap();
        assert!(trace.chains[0].tree_depths.iter().all(|&d| d == 1));
        assert!(trace.chains[0].treedepth_saturations > 0);
    }

    #[test]
    fn std_normal_moments() {
        let t = StdNormal(10);
        let s = SamplerSettings {
            chains: 4,
            tune: 500,
            draws: 2000,
            target_accept: 0.8,
            max_treedepth: 10,
            seed: 11,
        };
        let trace = sample(&t, &s).unwrap();
        assert_eq!(trace.n_divergences(), 0);
        let n = trace.n_draws_total() as f64;
        for i in 0..10 {
            let xs = trace.coordinate(i);
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 0.05, "coord {} mean {}", i, mean);
            assert!((0.9..1.1).contains(&var), "coord {} var {}", i, var);
        }
    }

    #[test]
    fn dual_averaging_hits_target_on_correlated_gaussian() {
        let t = Corr2d(0.9);
        let s = SamplerSettings {
            chains: 1,
            tune: 1000,
            draws: 2000,
            target_accept: 0.9,
            max_treedepth: 10,
            seed: 19,
        };
        let trace = sample(&t, &s).unwrap();
        let c = &trace.chains[0];
        let mean_accept = c.accept_stat.iter().sum::<f64>() / c.accept_stat.len() as f64;
        assert!(
            (0.85..0.95).contains(&mean_accept),
            "mean accept {}",
            mean_accept
        );
    }

    #[test]
    fn ks_statistic_on_1d_normal() {
        let t = StdNormal(1);
        let s = SamplerSettings {
            chains: 2,
            tune: 500,
            draws: 10_000,
            target_accept: 0.8,
            max_treedepth: 10,
            seed: 23,
        };
        let trace = sample(&t, &s).unwrap();
        let mut xs = trace.coordinate(0);
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let phi = |x: f64| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
        let mut ks: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let f = phi(x);
            ks = ks.max((f - i as f64 / n).abs());
            ks = ks.max(((i + 1) as f64 / n - f).abs());
        }
        assert!(ks < 0.02, "KS statistic {}", ks);
    }

    // Abramowitz-Stegun 7.1.26
    fn erf(x: f64) -> f64 {
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
                + 0.254829592)
                * t
                * (-x * x).exp();
        sign * y
    }

    #[test]
    fn trace_binary_round_trip() {
        let t = StdNormal(3);
        let s = SamplerSettings {
            chains: 2,
            tune: 50,
            draws: 20,
            target_accept: 0.8,
            max_treedepth: 8,
            seed: 5,
        };
        let trace = sample(&t, &s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.bin");
        trace.write_binary(&path).unwrap();
        let back = Trace::read_binary(&path).unwrap();
        assert_eq!(back.dim, trace.dim);
        for (a, b) in trace.chains.iter().zip(&back.chains) {
            assert_eq!(a.draws, b.draws);
            assert_eq!(a.step_size, b.step_size);
        }
    }

    #[test]
    fn window_schedule_covers_tune() {
        for tune in [0usize, 10, 50, 100, 500, 1000, 5000] {
            let ends = window_ends(tune);
            for w in ends.windows(2) {
                assert!(w[0] < w[1]);
            }
            if let Some(&last) = ends.last() {
                assert!(last <= tune);
            }
        }
    }
}
