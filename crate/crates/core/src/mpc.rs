//! Finite-control-set predictive switching control.
//!
//! At every sampling instant the controller receives the measured feature
//! vector `(i_L, v_Cf, v_o, i_ref, V_in, i_o)`, rolls the mode-dependent
//! prediction model forward over an `N`-step horizon for candidate mode
//! sequences, scores each rollout with
//!
//! ```text
//! J = Σ_{n=1..N}  λ_I·(i_L[n] − i_ref)² + λ_Cf·(v_Cf[n] − v_Cf_ref)²
//! ```
//!
//! and applies the first mode of the best sequence in receding-horizon
//! fashion. Exhaustive enumeration visits all `4^N` sequences; beam search
//! expands depth by depth and keeps only the `K` cheapest partial sequences,
//! which bounds the work to `K·4·N` expansions at the price of approximate
//! optimality.
//!
//! Cost ties are broken deterministically: mode order `OP < PO < NO < ON`,
//! then lexicographic sequence order. Determinism here is what makes expert
//! labels reproducible across dataset regeneration and relabeling.

use serde::{Deserialize, Serialize};

use crate::converter::{Exogenous, PlantState, SwitchMode, SwitchedPlant};
use crate::scenario::SwitchingPolicy;
use crate::{Error, Result};

/// Measured information available to a switching policy, in fixed order:
/// `i_L, v_Cf, v_o, i_ref, V_in, i_o`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub i_l: f64,
    pub v_cf: f64,
    pub v_o: f64,
    pub i_ref: f64,
    pub v_in: f64,
    pub i_o: f64,
}

impl FeatureVector {
    pub fn from_parts(x: &PlantState, w: &Exogenous, i_ref: f64) -> Self {
        FeatureVector {
            i_l: x.i_l,
            v_cf: x.v_cf,
            v_o: x.v_o,
            i_ref,
            v_in: w.v_in,
            i_o: w.i_o,
        }
    }

    pub fn state(&self) -> PlantState {
        PlantState::new(self.i_l, self.v_cf, self.v_o)
    }

    pub fn exogenous(&self) -> Exogenous {
        Exogenous::new(self.v_in, self.i_o)
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.i_l, self.v_cf, self.v_o, self.i_ref, self.v_in, self.i_o]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        FeatureVector { i_l: a[0], v_cf: a[1], v_o: a[2], i_ref: a[3], v_in: a[4], i_o: a[5] }
    }

    pub fn to_f32(&self) -> [f32; 6] {
        let a = self.as_array();
        [a[0] as f32, a[1] as f32, a[2] as f32, a[3] as f32, a[4] as f32, a[5] as f32]
    }

    pub fn from_f32(a: [f32; 6]) -> Self {
        FeatureVector::from_array([
            a[0] as f64,
            a[1] as f64,
            a[2] as f64,
            a[3] as f64,
            a[4] as f64,
            a[5] as f64,
        ])
    }

    /// Rounds every component through single precision. The closed-loop
    /// runner quantizes measurements before any policy sees them, so a
    /// stored single-precision sample reproduces its label exactly when
    /// replayed through the expert.
    pub fn quantize(&self) -> Self {
        FeatureVector::from_f32(self.to_f32())
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Horizon, beam width, and cost weights of the predictive controller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Prediction horizon N (steps).
    pub horizon: usize,
    /// Beam width K (retained partial sequences per depth).
    pub beam_width: usize,
    /// Current tracking weight λ_I.
    pub lambda_i: f64,
    /// Capacitor balancing weight λ_Cf.
    pub lambda_cf: f64,
    /// Balancing target for the internal capacitor voltage (V).
    pub v_cf_ref: f64,
}

impl MpcConfig {
    /// Longest horizon representable by the 2-bit path encoding used for
    /// deterministic lexicographic tie-breaks.
    pub const MAX_HORIZON: usize = 31;

    /// Horizon beyond which exhaustive enumeration is refused.
    pub const MAX_EXHAUSTIVE_HORIZON: usize = 10;

    /// Bench configuration for an output reference: N = 5, K = 15,
    /// λ_I = 1.0, λ_Cf = 0.007, capacitor target at half the reference.
    pub fn for_output_ref(v_ref: f64) -> Self {
        MpcConfig {
            horizon: 5,
            beam_width: 15,
            lambda_i: 1.0,
            lambda_cf: 0.007,
            v_cf_ref: 0.5 * v_ref,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 || self.horizon > Self::MAX_HORIZON {
            return Err(Error::InvalidConfig(format!(
                "horizon must be in 1..={}, got {}",
                Self::MAX_HORIZON,
                self.horizon
            )));
        }
        if self.beam_width < 1 {
            return Err(Error::InvalidConfig("beam width must be at least 1".into()));
        }
        if !(self.lambda_i >= 0.0 && self.lambda_cf >= 0.0) {
            return Err(Error::InvalidConfig("cost weights must be non-negative".into()));
        }
        if !self.v_cf_ref.is_finite() {
            return Err(Error::InvalidConfig("capacitor reference must be finite".into()));
        }
        Ok(())
    }
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig::for_output_ref(180.0)
    }
}

/// Per-stage tracking cost of one predicted state. The output voltage does
/// not enter; it is regulated indirectly through the outer loop.
pub fn stage_cost(x_pred: &PlantState, i_ref: f64, cfg: &MpcConfig) -> f64 {
    let e_i = x_pred.i_l - i_ref;
    let e_cf = x_pred.v_cf - cfg.v_cf_ref;
    cfg.lambda_i * e_i * e_i + cfg.lambda_cf * e_cf * e_cf
}

/// Cost of rolling out a mode sequence from `x`, holding `w` and `i_ref`
/// constant over the horizon. Summation starts at the first post-step state.
pub fn sequence_cost<P: SwitchedPlant>(
    x: &PlantState,
    w: &Exogenous,
    i_ref: f64,
    seq: &[SwitchMode],
    plant: &P,
    cfg: &MpcConfig,
) -> Result<f64> {
    if seq.len() > cfg.horizon {
        return Err(Error::InvalidConfig(format!(
            "sequence length {} exceeds horizon {}",
            seq.len(),
            cfg.horizon
        )));
    }
    let mut state = *x;
    let mut cost = 0.0;
    for &m in seq {
        state = plant.step_mode(&state, w, m);
        if !state.is_finite() {
            return Err(Error::NonFinite { what: "predicted state" });
        }
        cost += stage_cost(&state, i_ref, cfg);
    }
    Ok(cost)
}

// Mode sequences are packed two bits per mode, first mode in the most
// significant position, so that numeric order on the packed word equals
// lexicographic order on the sequence under the fixed mode order.
#[inline]
fn path_push(path: u64, m: SwitchMode) -> u64 {
    (path << 2) | m.index() as u64
}

#[inline]
fn path_first(path: u64, len: usize) -> SwitchMode {
    let idx = ((path >> (2 * (len - 1))) & 0b11) as usize;
    SwitchMode::from_index(idx).expect("2-bit mode index")
}

/// Decodes a packed sequence of the given length, first mode first.
fn path_modes(path: u64, len: usize) -> Vec<SwitchMode> {
    (0..len)
        .map(|i| {
            let idx = ((path >> (2 * (len - 1 - i))) & 0b11) as usize;
            SwitchMode::from_index(idx).expect("2-bit mode index")
        })
        .collect()
}

#[inline]
fn beats(cost: f64, path: u64, best: &Option<(f64, u64)>) -> bool {
    match best {
        None => true,
        Some((bc, bp)) => match cost.total_cmp(bc) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Equal => path < *bp,
            std::cmp::Ordering::Greater => false,
        },
    }
}

/// Outcome of one receding-horizon decision.
#[derive(Clone, Copy, Debug)]
pub struct DecisionStats {
    pub mode: SwitchMode,
    pub cost: f64,
    /// Number of single-step expansions (stage evaluations) performed.
    pub expansions: usize,
    /// Number of complete sequences scored (exhaustive search only).
    pub sequences: usize,
}

/// Globally optimal receding-horizon decision by enumerating all `4^N`
/// sequences. Refuses horizons beyond [`MpcConfig::MAX_EXHAUSTIVE_HORIZON`].
pub fn exhaustive_decide<P: SwitchedPlant>(
    z: &FeatureVector,
    plant: &P,
    cfg: &MpcConfig,
) -> Result<(SwitchMode, f64)> {
    exhaustive_decide_with_stats(z, plant, cfg).map(|s| (s.mode, s.cost))
}

/// Exhaustive decision with search counters, for instrumentation.
pub fn exhaustive_decide_with_stats<P: SwitchedPlant>(
    z: &FeatureVector,
    plant: &P,
    cfg: &MpcConfig,
) -> Result<DecisionStats> {
    cfg.validate()?;
    if cfg.horizon > MpcConfig::MAX_EXHAUSTIVE_HORIZON {
        return Err(Error::HorizonTooLarge {
            horizon: cfg.horizon,
            max: MpcConfig::MAX_EXHAUSTIVE_HORIZON,
        });
    }

    struct Dfs<'a, P> {
        plant: &'a P,
        cfg: &'a MpcConfig,
        w: Exogenous,
        i_ref: f64,
        best: Option<(f64, u64)>,
        expansions: usize,
        sequences: usize,
    }

    impl<P: SwitchedPlant> Dfs<'_, P> {
        fn descend(&mut self, x: &PlantState, depth: usize, cost: f64, path: u64) {
            for m in SwitchMode::ALL {
                let next = self.plant.step_mode(x, &self.w, m);
                let c = cost + stage_cost(&next, self.i_ref, self.cfg);
                let p = path_push(path, m);
                self.expansions += 1;
                if depth + 1 == self.cfg.horizon {
                    self.sequences += 1;
                    if beats(c, p, &self.best) {
                        self.best = Some((c, p));
                    }
                } else {
                    self.descend(&next, depth + 1, c, p);
                }
            }
        }
    }

    let mut dfs = Dfs {
        plant,
        cfg,
        w: z.exogenous(),
        i_ref: z.i_ref,
        best: None,
        expansions: 0,
        sequences: 0,
    };
    dfs.descend(&z.state(), 0, 0.0, 0);
    let (cost, path) = dfs.best.expect("horizon >= 1 guarantees at least one sequence");
    Ok(DecisionStats {
        mode: path_first(path, cfg.horizon),
        cost,
        expansions: dfs.expansions,
        sequences: dfs.sequences,
    })
}

/// One retained partial sequence during beam expansion.
#[derive(Clone, Copy, Debug)]
pub struct BeamNode {
    /// Cumulative cost of the partial sequence.
    pub cost: f64,
    /// Packed mode sequence (two bits per mode, first mode most
    /// significant).
    pub path: u64,
    /// Predicted state at the end of the partial sequence.
    pub state: PlantState,
}

/// Reusable buffers for beam expansion; keeps the hot decision path free of
/// allocation.
#[derive(Debug, Default)]
pub struct BeamWorkspace {
    current: Vec<BeamNode>,
    children: Vec<BeamNode>,
}

impl BeamWorkspace {
    pub fn new() -> Self {
        BeamWorkspace::default()
    }
}

/// Beam-search receding-horizon decision: at each depth every retained
/// partial sequence is expanded by all four modes and only the `K`
/// lowest-cost children survive (full sort, deterministic tie-break).
pub fn beam_decide<P: SwitchedPlant>(
    z: &FeatureVector,
    plant: &P,
    cfg: &MpcConfig,
) -> (SwitchMode, f64) {
    let mut ws = BeamWorkspace::new();
    let stats = beam_decide_reusing(&mut ws, z, plant, cfg);
    (stats.mode, stats.cost)
}

/// Beam decision reusing caller-owned buffers, with expansion counters.
pub fn beam_decide_reusing<P: SwitchedPlant>(
    ws: &mut BeamWorkspace,
    z: &FeatureVector,
    plant: &P,
    cfg: &MpcConfig,
) -> DecisionStats {
    debug_assert!(cfg.validate().is_ok());
    let w = z.exogenous();
    let i_ref = z.i_ref;
    let mut expansions = 0usize;

    ws.current.clear();
    ws.current.push(BeamNode { cost: 0.0, path: 0, state: z.state() });

    for _depth in 0..cfg.horizon {
        ws.children.clear();
        for node in &ws.current {
            for m in SwitchMode::ALL {
                let next = plant.step_mode(&node.state, &w, m);
                expansions += 1;
                ws.children.push(BeamNode {
                    cost: node.cost + stage_cost(&next, i_ref, cfg),
                    path: path_push(node.path, m),
                    state: next,
                });
            }
        }
        ws.children
            .sort_unstable_by(|a, b| a.cost.total_cmp(&b.cost).then(a.path.cmp(&b.path)));
        ws.children.truncate(cfg.beam_width);
        std::mem::swap(&mut ws.current, &mut ws.children);
    }

    let best = ws.current.first().expect("beam keeps at least one node");
    DecisionStats {
        mode: path_first(best.path, cfg.horizon),
        cost: best.cost,
        expansions,
        sequences: 0,
    }
}

/// Single-step greedy rule: the mode whose immediate successor has the
/// lowest stage cost. Kept as a deliberately myopic baseline labeler.
pub fn greedy_decide<P: SwitchedPlant>(
    z: &FeatureVector,
    plant: &P,
    cfg: &MpcConfig,
) -> (SwitchMode, f64) {
    let w = z.exogenous();
    let x = z.state();
    let mut best = None;
    for m in SwitchMode::ALL {
        let next = plant.step_mode(&x, &w, m);
        let c = stage_cost(&next, z.i_ref, cfg);
        if beats(c, m.index() as u64, &best) {
            best = Some((c, m.index() as u64));
        }
    }
    let (cost, idx) = best.expect("four candidate modes");
    (SwitchMode::from_index(idx as usize).unwrap(), cost)
}

/// Receding-horizon beam-search expert wrapped as a switching policy.
pub struct ExpertPolicy<P: SwitchedPlant> {
    plant: P,
    cfg: MpcConfig,
    ws: BeamWorkspace,
}

impl<P: SwitchedPlant> ExpertPolicy<P> {
    pub fn new(plant: P, cfg: MpcConfig) -> Self {
        ExpertPolicy { plant, cfg, ws: BeamWorkspace::new() }
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }
}

impl<P: SwitchedPlant> SwitchingPolicy for ExpertPolicy<P> {
    fn decide(&mut self, z: &FeatureVector) -> SwitchMode {
        beam_decide_reusing(&mut self.ws, z, &self.plant, &self.cfg).mode
    }
}

/// Decodes the full best sequence of a beam decision; test helper.
pub fn beam_best_sequence<P: SwitchedPlant>(
    z: &FeatureVector,
    plant: &P,
    cfg: &MpcConfig,
) -> Vec<SwitchMode> {
    let mut ws = BeamWorkspace::new();
    beam_decide_reusing(&mut ws, z, plant, cfg);
    path_modes(ws.current[0].path, cfg.horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::converter::ConverterParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> MpcConfig {
        MpcConfig::for_output_ref(180.0)
    }

    fn nominal_feature() -> FeatureVector {
        FeatureVector::from_array([10.0, 90.0, 180.0, 12.0, 120.0, 5.0])
    }

    fn random_feature(rng: &mut ChaCha8Rng) -> FeatureVector {
        FeatureVector::from_array([
            rng.random_range(-20.0..50.0),
            rng.random_range(40.0..140.0),
            rng.random_range(80.0..260.0),
            rng.random_range(-20.0..50.0),
            rng.random_range(80.0..140.0),
            rng.random_range(0.0..20.0),
        ])
    }

    #[test]
    fn stage_cost_hand_cases() {
        let c = cfg();
        let perfect = PlantState::new(12.0, 90.0, 170.0);
        assert_eq!(stage_cost(&perfect, 12.0, &c), 0.0);

        // errors of 2 A and 10 V under the bench weights:
        // 1.0·2² + 0.007·10² = 4.7
        let off = PlantState::new(14.0, 100.0, 180.0);
        assert!((stage_cost(&off, 12.0, &c) - 4.7).abs() < 1e-12);

        let mut no_cf = c;
        no_cf.lambda_cf = 0.0;
        assert!((stage_cost(&off, 12.0, &no_cf) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_cost_definition() {
        let p = ConverterParams::nominal();
        let c = cfg();
        let z = nominal_feature();

        assert_eq!(sequence_cost(&z.state(), &z.exogenous(), z.i_ref, &[], &p, &c).unwrap(), 0.0);

        let one = [SwitchMode::No];
        let stepped = p.step_mode(&z.state(), &z.exogenous(), SwitchMode::No);
        let expect = stage_cost(&stepped, z.i_ref, &c);
        assert_eq!(
            sequence_cost(&z.state(), &z.exogenous(), z.i_ref, &one, &p, &c).unwrap(),
            expect
        );

        // Non-negative stages make every prefix no more expensive than the
        // full sequence.
        let seq = [SwitchMode::No, SwitchMode::Op, SwitchMode::Po, SwitchMode::On, SwitchMode::No];
        let mut prev = 0.0;
        for len in 0..=seq.len() {
            let cost =
                sequence_cost(&z.state(), &z.exogenous(), z.i_ref, &seq[..len], &p, &c).unwrap();
            assert!(cost >= prev);
            prev = cost;
        }

        let too_long = [SwitchMode::No; 6];
        assert!(sequence_cost(&z.state(), &z.exogenous(), z.i_ref, &too_long, &p, &c).is_err());
    }

    #[test]
    fn exhaustive_counts_sequences_and_refuses_large_horizons() {
        let p = ConverterParams::nominal();
        let c = cfg();
        let stats = exhaustive_decide_with_stats(&nominal_feature(), &p, &c).unwrap();
        assert_eq!(stats.sequences, 1024);

        let mut big = c;
        big.horizon = 11;
        assert!(matches!(
            exhaustive_decide(&nominal_feature(), &p, &big),
            Err(Error::HorizonTooLarge { .. })
        ));
    }

    #[test]
    fn exhaustive_n1_is_single_step_argmin() {
        let p = ConverterParams::nominal();
        let mut c = cfg();
        c.horizon = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let z = random_feature(&mut rng);
            let (mode, cost) = exhaustive_decide(&z, &p, &c).unwrap();
            let (gmode, gcost) = greedy_decide(&z, &p, &c);
            assert_eq!(mode, gmode);
            assert_eq!(cost, gcost);
        }
    }

    #[test]
    fn starved_current_selects_the_charging_mode() {
        // i_L far below i_ref at nominal operating voltages: only NO gives
        // the maximal positive current slope, and the full enumeration picks
        // it as the first move.
        let p = ConverterParams::nominal();
        let z = FeatureVector::from_array([0.0, 90.0, 180.0, 20.0, 120.0, 5.0]);
        let (mode, _) = exhaustive_decide(&z, &p, &cfg()).unwrap();
        assert_eq!(mode, SwitchMode::No);
    }

    #[test]
    fn beam_matches_exhaustive_when_wide_enough() {
        let p = ConverterParams::nominal();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=3usize {
            let mut c = cfg();
            c.horizon = n;
            c.beam_width = 4usize.pow(n as u32 - 1);
            for _ in 0..200 {
                let z = random_feature(&mut rng);
                let (em, ec) = exhaustive_decide(&z, &p, &c).unwrap();
                let (bm, bc) = beam_decide(&z, &p, &c);
                assert_eq!(em, bm);
                assert_eq!(ec, bc);
            }
        }
    }

    #[test]
    fn narrow_beam_never_beats_exhaustive() {
        let p = ConverterParams::nominal();
        let mut c = cfg();
        c.horizon = 2;
        c.beam_width = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let z = random_feature(&mut rng);
            let (_, ec) = exhaustive_decide(&z, &p, &c).unwrap();
            let (_, bc) = beam_decide(&z, &p, &c);
            assert!(bc >= ec);
        }
    }

    #[test]
    fn beam_expansion_count_is_bounded() {
        let p = ConverterParams::nominal();
        let c = cfg();
        let mut ws = BeamWorkspace::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let z = random_feature(&mut rng);
            let stats = beam_decide_reusing(&mut ws, &z, &p, &c);
            assert!(stats.expansions <= c.beam_width * 4 * c.horizon);
        }
    }

    #[test]
    fn decision_is_invariant_under_exact_cost_scaling() {
        let p = ConverterParams::nominal();
        let base = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..200 {
            let z = random_feature(&mut rng);
            let (m0, _) = beam_decide(&z, &p, &base);
            for scale in [0.5, 2.0, 4.0] {
                let scaled = MpcConfig {
                    lambda_i: base.lambda_i * scale,
                    lambda_cf: base.lambda_cf * scale,
                    ..base
                };
                let (m1, _) = beam_decide(&z, &p, &scaled);
                assert_eq!(m0, m1);
            }
        }
    }

    #[test]
    fn decisions_are_deterministic() {
        let p = ConverterParams::nominal();
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let z = random_feature(&mut rng);
            assert_eq!(beam_decide(&z, &p, &c), beam_decide(&z, &p, &c));
            assert_eq!(
                exhaustive_decide(&z, &p, &c).unwrap(),
                exhaustive_decide(&z, &p, &c).unwrap()
            );
        }
    }

    #[test]
    fn best_sequence_has_horizon_length() {
        let p = ConverterParams::nominal();
        let c = cfg();
        let seq = beam_best_sequence(&nominal_feature(), &p, &c);
        assert_eq!(seq.len(), c.horizon);
    }

    #[test]
    fn quantization_is_idempotent() {
        let z = FeatureVector::from_array([10.1234567891, 90.7, 180.3, 12.0, 120.0, 5.5]);
        let q = z.quantize();
        assert_eq!(q, q.quantize());
    }
}
