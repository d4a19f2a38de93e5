//! Switched-affine model of a flying-capacitor three-level boost converter.
//!
//! The converter carries three states — inductor current `i_L`, flying-
//! capacitor voltage `v_Cf`, and output voltage `v_o` — driven by two
//! measured exogenous quantities, the input voltage `V_in` and the output
//! current `i_o`. Each admissible switching mode selects one affine vector
//! field
//!
//! ```text
//! di_L/dt  = (V_in − a_vo·v_o − a_cf·v_Cf) / L
//! dv_Cf/dt = β·i_L / C_f
//! dv_o/dt  = (α·i_L − i_o) / C
//! ```
//!
//! advanced with forward Euler at the control-update period `T_s`. `i_o` is
//! a measurement, never reconstructed from a load model, so prediction does
//! not require knowledge of the load.
//!
//! Of the nine symbolic `(S_A, S_B)` combinations only four are electrically
//! viable; [`SwitchMode`] makes the other five unrepresentable.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Terminal-voltage / charge-direction level symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    P,
    O,
    N,
}

/// One of the four admissible switching modes.
///
/// `S_A` encodes the inductor terminal-voltage level (positive,
/// intermediate, negative) and `S_B` the flying-capacitor charge direction
/// (forward, none, reverse). The declaration order fixes the deterministic
/// tie-break order used by every decision rule in this crate:
/// `OP < PO < NO < ON`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SwitchMode {
    Op,
    Po,
    No,
    On,
}

impl SwitchMode {
    /// All modes in tie-break order.
    pub const ALL: [SwitchMode; 4] = [SwitchMode::Op, SwitchMode::Po, SwitchMode::No, SwitchMode::On];

    pub fn index(self) -> usize {
        match self {
            SwitchMode::Op => 0,
            SwitchMode::Po => 1,
            SwitchMode::No => 2,
            SwitchMode::On => 3,
        }
    }

    pub fn from_index(idx: usize) -> Option<SwitchMode> {
        SwitchMode::ALL.get(idx).copied()
    }

    /// Inductor terminal-voltage level symbol.
    pub fn s_a(self) -> Level {
        match self {
            SwitchMode::Op => Level::O,
            SwitchMode::Po => Level::P,
            SwitchMode::No => Level::N,
            SwitchMode::On => Level::O,
        }
    }

    /// Flying-capacitor charge-direction symbol.
    pub fn s_b(self) -> Level {
        match self {
            SwitchMode::Op => Level::P,
            SwitchMode::Po => Level::O,
            SwitchMode::No => Level::O,
            SwitchMode::On => Level::N,
        }
    }

    /// Reassembles a mode from its `(S_A, S_B)` symbols. The five
    /// combinations that violate the topology return `None`.
    pub fn from_levels(s_a: Level, s_b: Level) -> Option<SwitchMode> {
        match (s_a, s_b) {
            (Level::O, Level::P) => Some(SwitchMode::Op),
            (Level::P, Level::O) => Some(SwitchMode::Po),
            (Level::N, Level::O) => Some(SwitchMode::No),
            (Level::O, Level::N) => Some(SwitchMode::On),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SwitchMode::Op => "OP",
            SwitchMode::Po => "PO",
            SwitchMode::No => "NO",
            SwitchMode::On => "ON",
        }
    }

    pub fn parse(s: &str) -> Option<SwitchMode> {
        match s {
            "OP" => Some(SwitchMode::Op),
            "PO" => Some(SwitchMode::Po),
            "NO" => Some(SwitchMode::No),
            "ON" => Some(SwitchMode::On),
            _ => None,
        }
    }
}

impl std::fmt::Display for SwitchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Dimensionless coefficients selecting the active vector field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCoefficients {
    pub a_vo: f64,
    pub a_cf: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Coefficient row for one switching mode.
pub fn mode_coefficients(m: SwitchMode) -> ModeCoefficients {
    match m {
        SwitchMode::No => ModeCoefficients { a_vo: 0.0, a_cf: 0.0, alpha: 0.0, beta: 0.0 },
        SwitchMode::Po => ModeCoefficients { a_vo: 1.0, a_cf: 0.0, alpha: 1.0, beta: 0.0 },
        SwitchMode::Op => ModeCoefficients { a_vo: 0.0, a_cf: 1.0, alpha: 1.0, beta: 1.0 },
        SwitchMode::On => ModeCoefficients { a_vo: 1.0, a_cf: -1.0, alpha: 1.0, beta: -1.0 },
    }
}

/// Converter passives, control-update period, and hard current limits.
///
/// The hard limit interval `i_safe` feeds the outer-loop reference clamp and
/// the violation counter. The default is wide on purpose: the worst-case
/// steady inductor current over the randomized operating ranges is
/// `180² / (10 Ω · 80 V) ≈ 40.5 A`, so a competently controlled converter
/// never approaches the bound while a runaway policy trips it within
/// milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConverterParams {
    /// Inductance (H).
    pub l: f64,
    /// Flying capacitance (F).
    pub c_f: f64,
    /// Output capacitance (F).
    pub c: f64,
    /// Control-update period (s).
    pub ts: f64,
    /// Lower hard inductor-current limit (A).
    pub i_safe_lo: f64,
    /// Upper hard inductor-current limit (A).
    pub i_safe_hi: f64,
}

impl ConverterParams {
    /// Nominal bench values: 1 mH, 50 µF, 125 µF, 20 µs.
    pub fn nominal() -> Self {
        ConverterParams {
            l: 1.0e-3,
            c_f: 50.0e-6,
            c: 125.0e-6,
            ts: 20.0e-6,
            i_safe_lo: -60.0,
            i_safe_hi: 60.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l > 0.0 && self.c_f > 0.0 && self.c > 0.0 && self.ts > 0.0) {
            return Err(Error::InvalidConfig(
                "converter passives and sampling period must be strictly positive".into(),
            ));
        }
        if !(self.i_safe_lo < self.i_safe_hi) {
            return Err(Error::InvalidConfig(
                "current limits must satisfy i_safe_lo < i_safe_hi".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ConverterParams {
    fn default() -> Self {
        ConverterParams::nominal()
    }
}

/// Converter state: inductor current (A), flying-capacitor voltage (V),
/// output voltage (V).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub i_l: f64,
    pub v_cf: f64,
    pub v_o: f64,
}

impl PlantState {
    pub fn new(i_l: f64, v_cf: f64, v_o: f64) -> Self {
        PlantState { i_l, v_cf, v_o }
    }

    pub fn is_finite(&self) -> bool {
        self.i_l.is_finite() && self.v_cf.is_finite() && self.v_o.is_finite()
    }

    /// True when every component is finite and inside ±`limit`. NaN fails.
    pub fn within(&self, limit: f64) -> bool {
        self.i_l.abs() <= limit && self.v_cf.abs() <= limit && self.v_o.abs() <= limit
    }
}

/// Measured exogenous input: input voltage (V) and output current (A).
///
/// `i_o` is always a measurement of the delivered current; the prediction
/// path never substitutes a load model for it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exogenous {
    pub v_in: f64,
    pub i_o: f64,
}

impl Exogenous {
    pub fn new(v_in: f64, i_o: f64) -> Self {
        Exogenous { v_in, i_o }
    }

    pub fn is_finite(&self) -> bool {
        self.v_in.is_finite() && self.i_o.is_finite()
    }

    pub fn within(&self, limit: f64) -> bool {
        self.v_in.abs() <= limit && self.i_o.abs() <= limit
    }
}

/// A plant whose one-step dynamics are selected by a [`SwitchMode`].
///
/// Implementations are pure: the same `(x, w, m)` always maps to the same
/// successor, which the receding-horizon search and the label-replay audits
/// both rely on.
pub trait SwitchedPlant {
    /// One forward-Euler step under mode `m`. Total over finite inputs;
    /// finiteness policing is the caller's job.
    fn step_mode(&self, x: &PlantState, w: &Exogenous, m: SwitchMode) -> PlantState;

    /// Control-update period (s).
    fn ts(&self) -> f64;

    /// Hard inductor-current interval `(lo, hi)`.
    fn i_safe(&self) -> (f64, f64);

    /// Regulated operating point for a reference voltage, input voltage,
    /// and load resistance; used as the default episode start.
    fn steady_state(&self, v_ref: f64, v_in: f64, r: f64) -> PlantState;
}

impl SwitchedPlant for ConverterParams {
    fn step_mode(&self, x: &PlantState, w: &Exogenous, m: SwitchMode) -> PlantState {
        let k = mode_coefficients(m);
        let di_l = (w.v_in - k.a_vo * x.v_o - k.a_cf * x.v_cf) / self.l;
        let dv_cf = k.beta * x.i_l / self.c_f;
        let dv_o = (k.alpha * x.i_l - w.i_o) / self.c;
        PlantState {
            i_l: x.i_l + self.ts * di_l,
            v_cf: x.v_cf + self.ts * dv_cf,
            v_o: x.v_o + self.ts * dv_o,
        }
    }

    fn ts(&self) -> f64 {
        self.ts
    }

    fn i_safe(&self) -> (f64, f64) {
        (self.i_safe_lo, self.i_safe_hi)
    }

    /// Lossless power balance: `i_L = v_ref² / (R·V_in)`, with the flying
    /// capacitor held at half the output reference.
    fn steady_state(&self, v_ref: f64, v_in: f64, r: f64) -> PlantState {
        PlantState {
            i_l: v_ref * v_ref / (r * v_in),
            v_cf: 0.5 * v_ref,
            v_o: v_ref,
        }
    }
}

/// One-step prediction `x + T_s·(A_m x + B w)` with input checking.
pub fn discrete_step(
    x: &PlantState,
    w: &Exogenous,
    m: SwitchMode,
    p: &ConverterParams,
) -> Result<PlantState> {
    if !x.is_finite() {
        return Err(Error::NonFinite { what: "plant state" });
    }
    if !w.is_finite() {
        return Err(Error::NonFinite { what: "exogenous input" });
    }
    Ok(p.step_mode(x, w, m))
}

/// Applies relative perturbations to the passives: `L' = (1+δ_L)·L` and
/// likewise for `C_f`, `C`. Sampling period and current limits are kept.
pub fn perturb_params(p: &ConverterParams, d_l: f64, d_cf: f64, d_c: f64) -> Result<ConverterParams> {
    for (name, d) in [("δ_L", d_l), ("δ_Cf", d_cf), ("δ_C", d_c)] {
        if !d.is_finite() || 1.0 + d <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "perturbation {name} = {d} would produce a nonphysical component"
            )));
        }
    }
    Ok(ConverterParams {
        l: (1.0 + d_l) * p.l,
        c_f: (1.0 + d_cf) * p.c_f,
        c: (1.0 + d_c) * p.c,
        ..*p
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nominal_case() -> (PlantState, Exogenous, ConverterParams) {
        (
            PlantState::new(10.0, 90.0, 180.0),
            Exogenous::new(120.0, 5.0),
            ConverterParams::nominal(),
        )
    }

    fn assert_close(actual: f64, expected: f64, rel: f64) {
        let scale = expected.abs().max(1.0);
        assert!(
            (actual - expected).abs() <= rel * scale,
            "expected {expected}, got {actual}"
        );
    }

    #[test]
    fn coefficient_table_rows() {
        let no = mode_coefficients(SwitchMode::No);
        assert_eq!((no.a_vo, no.a_cf, no.alpha, no.beta), (0.0, 0.0, 0.0, 0.0));
        let po = mode_coefficients(SwitchMode::Po);
        assert_eq!((po.a_vo, po.a_cf, po.alpha, po.beta), (1.0, 0.0, 1.0, 0.0));
        let op = mode_coefficients(SwitchMode::Op);
        assert_eq!((op.a_vo, op.a_cf, op.alpha, op.beta), (0.0, 1.0, 1.0, 1.0));
        let on = mode_coefficients(SwitchMode::On);
        assert_eq!((on.a_vo, on.a_cf, on.alpha, on.beta), (1.0, -1.0, 1.0, -1.0));
    }

    #[test]
    fn level_decomposition_round_trips() {
        for m in SwitchMode::ALL {
            assert_eq!(SwitchMode::from_levels(m.s_a(), m.s_b()), Some(m));
        }
        // The five struck-out combinations stay unrepresentable.
        let invalid = [
            (Level::P, Level::P),
            (Level::N, Level::P),
            (Level::O, Level::O),
            (Level::P, Level::N),
            (Level::N, Level::N),
        ];
        for (sa, sb) in invalid {
            assert_eq!(SwitchMode::from_levels(sa, sb), None);
        }
    }

    #[test]
    fn one_step_prediction_matches_hand_arithmetic() {
        let (x, w, p) = nominal_case();
        let cases = [
            (SwitchMode::No, (12.4, 90.0, 179.2)),
            (SwitchMode::Po, (8.8, 90.0, 180.8)),
            (SwitchMode::Op, (10.6, 94.0, 180.8)),
            (SwitchMode::On, (10.6, 86.0, 180.8)),
        ];
        for (m, (i_l, v_cf, v_o)) in cases {
            let next = discrete_step(&x, &w, m, &p).unwrap();
            assert_close(next.i_l, i_l, 1e-12);
            assert_close(next.v_cf, v_cf, 1e-12);
            assert_close(next.v_o, v_o, 1e-12);
        }
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let (x, w, p) = nominal_case();
        let bad_x = PlantState::new(f64::NAN, 90.0, 180.0);
        assert!(matches!(
            discrete_step(&bad_x, &w, SwitchMode::No, &p),
            Err(Error::NonFinite { .. })
        ));
        let bad_w = Exogenous::new(f64::INFINITY, 5.0);
        assert!(matches!(
            discrete_step(&x, &bad_w, SwitchMode::No, &p),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn perturbation_scales_passives_only() {
        let p = ConverterParams::nominal();
        let same = perturb_params(&p, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(same, p);

        let up = perturb_params(&p, 0.0, 0.3, -0.3).unwrap();
        assert_close(up.c_f, 65.0e-6, 1e-12);
        assert_close(up.c, 87.5e-6, 1e-12);
        assert_eq!(up.l, p.l);
        assert_eq!(up.ts, p.ts);
        assert_eq!((up.i_safe_lo, up.i_safe_hi), (p.i_safe_lo, p.i_safe_hi));

        assert!(perturb_params(&p, -1.0, 0.0, 0.0).is_err());
        assert!(perturb_params(&p, 0.0, -1.5, 0.0).is_err());
    }

    #[test]
    fn params_validation_catches_degenerate_values() {
        let mut p = ConverterParams::nominal();
        assert!(p.validate().is_ok());
        p.l = 0.0;
        assert!(p.validate().is_err());
        p = ConverterParams::nominal();
        p.i_safe_lo = p.i_safe_hi;
        assert!(p.validate().is_err());
    }

    prop_compose! {
        fn arb_state()(i_l in -60.0..60.0f64, v_cf in 0.0..250.0f64, v_o in 0.0..400.0f64) -> PlantState {
            PlantState::new(i_l, v_cf, v_o)
        }
    }

    prop_compose! {
        fn arb_input()(v_in in 60.0..160.0f64, i_o in -5.0..30.0f64) -> Exogenous {
            Exogenous::new(v_in, i_o)
        }
    }

    proptest! {
        #[test]
        fn zero_beta_modes_leave_vcf_untouched(x in arb_state(), w in arb_input()) {
            let p = ConverterParams::nominal();
            for m in [SwitchMode::No, SwitchMode::Po] {
                let next = p.step_mode(&x, &w, m);
                prop_assert_eq!(next.v_cf, x.v_cf);
            }
        }

        #[test]
        fn op_and_on_move_vcf_by_opposite_amounts(x in arb_state(), w in arb_input()) {
            let p = ConverterParams::nominal();
            let up = p.step_mode(&x, &w, SwitchMode::Op);
            let down = p.step_mode(&x, &w, SwitchMode::On);
            // the applied increments are exact negatives; the recovered
            // deltas may differ by one rounding of the addition
            let sum = (up.v_cf - x.v_cf) + (down.v_cf - x.v_cf);
            prop_assert!(sum.abs() <= 1e-12 * x.v_cf.abs().max(1.0));
        }

        #[test]
        fn vo_update_is_linear_in_io(x in arb_state(), w in arb_input()) {
            let p = ConverterParams::nominal();
            for m in SwitchMode::ALL {
                let with_io = p.step_mode(&x, &w, m);
                let without = p.step_mode(&x, &Exogenous::new(w.v_in, 0.0), m);
                let expected = -p.ts * w.i_o / p.c;
                prop_assert!((with_io.v_o - without.v_o - expected).abs() <= 1e-12 * expected.abs().max(1.0));
                prop_assert_eq!(with_io.i_l, without.i_l);
                prop_assert_eq!(with_io.v_cf, without.v_cf);
            }
        }

        #[test]
        fn step_is_affine_in_state(x1 in arb_state(), x2 in arb_state(), w in arb_input()) {
            let p = ConverterParams::nominal();
            for m in SwitchMode::ALL {
                let k = mode_coefficients(m);
                let d = PlantState::new(x1.i_l - x2.i_l, x1.v_cf - x2.v_cf, x1.v_o - x2.v_o);
                // (I + T_s·A_m)·(x1 − x2)
                let lin = PlantState::new(
                    d.i_l + p.ts * (-k.a_cf * d.v_cf - k.a_vo * d.v_o) / p.l,
                    d.v_cf + p.ts * k.beta * d.i_l / p.c_f,
                    d.v_o + p.ts * k.alpha * d.i_l / p.c,
                );
                let s1 = p.step_mode(&x1, &w, m);
                let s2 = p.step_mode(&x2, &w, m);
                for (got, want) in [
                    (s1.i_l - s2.i_l, lin.i_l),
                    (s1.v_cf - s2.v_cf, lin.v_cf),
                    (s1.v_o - s2.v_o, lin.v_o),
                ] {
                    prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
                }
            }
        }
    }
}
