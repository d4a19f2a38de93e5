//! Trajectory metrics: tracking error, transients, band penalties, current
//! violations, switching statistics, energy balances, and realized
//! controller cost.
//!
//! All quantities are computed over the recorded samples of one closed-loop
//! rollout with period `T_s`. Settling times use a ±2 % band and report the
//! last exit from the band over the whole rollout; ripple is the standard
//! deviation over the tail window (from 0.4 s for rollouts of at least
//! 0.5 s, otherwise the last 20 % of the episode). Band penalties integrate
//! the excursion beyond ±5 % of the reference, normalized by it. The
//! realized cost `J` re-evaluates the controller stage cost on the recorded
//! states with the recorded current reference.

use serde::{Deserialize, Serialize};

use crate::mpc::{stage_cost, MpcConfig};
use crate::scenario::Trajectory;
use crate::{Error, Result};

/// Every reported metric for one rollout. Serializes to a flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: u64,

    pub mse_vo: f64,
    pub mse_vcf: f64,
    pub mse_il: f64,

    /// Signed steady-state error of the final sample.
    pub sse_vo: f64,
    pub sse_vcf: f64,

    /// Peak excursion above the reference (V); 0 when the trace never
    /// exceeds it.
    pub overshoot_vo: f64,
    pub overshoot_vcf: f64,
    /// Percentage overshoot relative to the reference.
    pub mp_vo: f64,
    pub mp_vcf: f64,

    /// Last exit time from the ±2 % band (s); the first sample time when
    /// the trace never leaves the band.
    pub t_set_vo: f64,
    pub t_set_vcf: f64,

    /// Standard deviation over the tail window.
    pub ripple_vo: f64,
    pub ripple_vcf: f64,
    /// Start of the tail window actually used (s).
    pub ripple_window_start: f64,

    pub penalty_over: f64,
    pub penalty_sag: f64,

    /// Samples with the inductor current outside the hard limit interval.
    pub n_il_viol: u64,

    pub switch_count: u64,
    pub switch_freq: f64,
    pub n_sa: u64,
    pub n_sb: u64,
    pub n_trans_total: u64,

    pub e_in: f64,
    pub e_out: f64,
    pub p_out_avg: f64,
    pub eff_avg: f64,

    /// Controller stage cost accumulated over the realized trajectory.
    pub j_sum: f64,
    pub j_mean: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Computes the full report for one rollout.
///
/// `v_ref` is the output reference, `mpc_cfg` supplies the capacitor
/// reference and the stage-cost weights for the realized-cost metrics, and
/// `i_safe` is the hard current interval for the violation counter.
pub fn compute_metrics(
    traj: &Trajectory,
    v_ref: f64,
    mpc_cfg: &MpcConfig,
    i_safe: (f64, f64),
) -> Result<MetricsReport> {
    if traj.is_empty() {
        return Err(Error::InvalidConfig("cannot compute metrics on an empty trajectory".into()));
    }
    let n = traj.records.len();
    let n_f = n as f64;
    let ts = traj.ts;
    let t_total = n_f * ts;
    let vcf_ref = mpc_cfg.v_cf_ref;

    let mut mse_vo = 0.0;
    let mut mse_vcf = 0.0;
    let mut mse_il = 0.0;
    let mut max_vo = f64::NEG_INFINITY;
    let mut max_vcf = f64::NEG_INFINITY;
    let mut t_out_vo: Option<f64> = None;
    let mut t_out_vcf: Option<f64> = None;
    let mut penalty_over = 0.0;
    let mut penalty_sag = 0.0;
    let mut n_il_viol = 0u64;
    let mut e_in = 0.0;
    let mut e_out = 0.0;
    let mut j_sum = 0.0;

    let vo_band = (0.98 * v_ref, 1.02 * v_ref);
    let vcf_band = (0.98 * vcf_ref, 1.02 * vcf_ref);

    for r in &traj.records {
        let e_vo = r.state.v_o - v_ref;
        let e_vcf = r.state.v_cf - vcf_ref;
        let e_il = r.state.i_l - r.i_ref;
        mse_vo += e_vo * e_vo;
        mse_vcf += e_vcf * e_vcf;
        mse_il += e_il * e_il;

        max_vo = max_vo.max(r.state.v_o);
        max_vcf = max_vcf.max(r.state.v_cf);

        if r.state.v_o < vo_band.0 || r.state.v_o > vo_band.1 {
            t_out_vo = Some(r.t);
        }
        if r.state.v_cf < vcf_band.0 || r.state.v_cf > vcf_band.1 {
            t_out_vcf = Some(r.t);
        }

        penalty_over += (r.state.v_o - 1.05 * v_ref).max(0.0);
        penalty_sag += (0.95 * v_ref - r.state.v_o).max(0.0);

        if r.state.i_l < i_safe.0 || r.state.i_l > i_safe.1 {
            n_il_viol += 1;
        }

        e_in += r.w.v_in * r.state.i_l;
        e_out += r.state.v_o * r.w.i_o;

        j_sum += stage_cost(&r.state, r.i_ref, mpc_cfg);
    }
    mse_vo /= n_f;
    mse_vcf /= n_f;
    mse_il /= n_f;
    penalty_over *= ts / v_ref;
    penalty_sag *= ts / v_ref;
    e_in *= ts;
    e_out *= ts;

    let last = traj.records.last().unwrap();
    let first_t = traj.records[0].t;

    // Tail window for ripple: fixed at 0.4 s for full-length rollouts,
    // otherwise the last 20 % of the episode.
    let window_start = if traj.duration() >= 0.5 - 1e-9 { 0.4 } else { 0.8 * traj.duration() };
    let tail_vo: Vec<f64> = traj
        .records
        .iter()
        .filter(|r| r.t >= window_start - 1e-12)
        .map(|r| r.state.v_o)
        .collect();
    let tail_vcf: Vec<f64> = traj
        .records
        .iter()
        .filter(|r| r.t >= window_start - 1e-12)
        .map(|r| r.state.v_cf)
        .collect();
    let (ripple_vo, ripple_vcf) = if tail_vo.is_empty() {
        (0.0, 0.0)
    } else {
        (population_std(&tail_vo), population_std(&tail_vcf))
    };

    let mut switch_count = 0u64;
    let mut n_sa = 0u64;
    let mut n_sb = 0u64;
    for pair in traj.records.windows(2) {
        let (prev, cur) = (pair[0].mode, pair[1].mode);
        if prev != cur {
            switch_count += 1;
        }
        if prev.s_a() != cur.s_a() {
            n_sa += 1;
        }
        if prev.s_b() != cur.s_b() {
            n_sb += 1;
        }
    }

    let overshoot_vo = (max_vo - v_ref).max(0.0);
    let overshoot_vcf = (max_vcf - vcf_ref).max(0.0);

    Ok(MetricsReport {
        n_samples: n as u64,
        mse_vo,
        mse_vcf,
        mse_il,
        sse_vo: last.state.v_o - v_ref,
        sse_vcf: last.state.v_cf - vcf_ref,
        overshoot_vo,
        overshoot_vcf,
        mp_vo: 100.0 * overshoot_vo / v_ref,
        mp_vcf: 100.0 * overshoot_vcf / vcf_ref,
        t_set_vo: t_out_vo.unwrap_or(first_t),
        t_set_vcf: t_out_vcf.unwrap_or(first_t),
        ripple_vo,
        ripple_vcf,
        ripple_window_start: window_start,
        penalty_over,
        penalty_sag,
        n_il_viol,
        switch_count,
        switch_freq: switch_count as f64 / t_total,
        n_sa,
        n_sb,
        n_trans_total: n_sa + n_sb,
        e_in,
        e_out,
        p_out_avg: e_out / t_total,
        eff_avg: if e_in != 0.0 { e_out / e_in } else { 0.0 },
        j_sum,
        j_mean: j_sum / n_f,
    })
}

/// Names and values of the numeric fields, in report order; used by the
/// table writers.
pub fn metric_columns(report: &MetricsReport) -> Vec<(&'static str, f64)> {
    vec![
        ("mse_vo", report.mse_vo),
        ("mse_vcf", report.mse_vcf),
        ("mse_il", report.mse_il),
        ("sse_vo", report.sse_vo),
        ("sse_vcf", report.sse_vcf),
        ("overshoot_vo", report.overshoot_vo),
        ("overshoot_vcf", report.overshoot_vcf),
        ("mp_vo", report.mp_vo),
        ("mp_vcf", report.mp_vcf),
        ("t_set_vo", report.t_set_vo),
        ("t_set_vcf", report.t_set_vcf),
        ("ripple_vo", report.ripple_vo),
        ("ripple_vcf", report.ripple_vcf),
        ("penalty_over", report.penalty_over),
        ("penalty_sag", report.penalty_sag),
        ("n_il_viol", report.n_il_viol as f64),
        ("switch_count", report.switch_count as f64),
        ("switch_freq", report.switch_freq),
        ("n_sa", report.n_sa as f64),
        ("n_sb", report.n_sb as f64),
        ("n_trans_total", report.n_trans_total as f64),
        ("e_in", report.e_in),
        ("e_out", report.e_out),
        ("p_out_avg", report.p_out_avg),
        ("eff_avg", report.eff_avg),
        ("j_sum", report.j_sum),
        ("j_mean", report.j_mean),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::converter::{Exogenous, PlantState, SwitchMode};
    use crate::scenario::StepRecord;

    const TS: f64 = 20e-6;

    fn cfg() -> MpcConfig {
        MpcConfig::for_output_ref(180.0)
    }

    fn traj_from(rows: &[(f64, f64, f64, f64, f64, f64, SwitchMode, f64)]) -> Trajectory {
        // rows: (i_l, v_cf, v_o, v_in, i_o, i_ref, mode, load_r)
        Trajectory {
            ts: TS,
            records: rows
                .iter()
                .enumerate()
                .map(|(k, &(i_l, v_cf, v_o, v_in, i_o, i_ref, mode, load_r))| StepRecord {
                    t: k as f64 * TS,
                    state: PlantState::new(i_l, v_cf, v_o),
                    w: Exogenous::new(v_in, i_o),
                    i_ref,
                    mode,
                    load_r,
                })
                .collect(),
        }
    }

    fn perfect_rows(n: usize) -> Vec<(f64, f64, f64, f64, f64, f64, SwitchMode, f64)> {
        (0..n).map(|_| (7.5, 90.0, 180.0, 120.0, 5.0, 7.5, SwitchMode::Po, 36.0)).collect()
    }

    #[test]
    fn perfect_trace_has_zero_errors_and_first_sample_settling() {
        let traj = traj_from(&perfect_rows(10));
        let m = compute_metrics(&traj, 180.0, &cfg(), (-60.0, 60.0)).unwrap();
        assert_eq!(m.mse_vo, 0.0);
        assert_eq!(m.mse_vcf, 0.0);
        assert_eq!(m.mse_il, 0.0);
        assert_eq!(m.overshoot_vo, 0.0);
        assert_eq!(m.overshoot_vcf, 0.0);
        assert_eq!(m.penalty_over, 0.0);
        assert_eq!(m.penalty_sag, 0.0);
        assert_eq!(m.t_set_vo, 0.0);
        assert_eq!(m.t_set_vcf, 0.0);
        assert_eq!(m.n_il_viol, 0);
        assert_eq!(m.switch_count, 0);
    }

    #[test]
    fn overshoot_and_penalty_hand_case() {
        let mut rows = perfect_rows(3);
        rows[1].2 = 190.0; // one 10 V spike
        let traj = traj_from(&rows);
        let m = compute_metrics(&traj, 180.0, &cfg(), (-60.0, 60.0)).unwrap();
        assert!((m.overshoot_vo - 10.0).abs() < 1e-12);
        assert!((m.mp_vo - 100.0 * 10.0 / 180.0).abs() < 1e-12);
        // only the sample at 190 V exceeds 1.05·180 = 189 V, by exactly 1 V
        assert!((m.penalty_over - TS / 180.0).abs() < 1e-18);
        assert_eq!(m.penalty_sag, 0.0);
        // MSE picks up the single spike: 10² / 3
        assert!((m.mse_vo - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn switching_statistics_hand_case() {
        let mut rows = perfect_rows(4);
        rows[0].6 = SwitchMode::Op;
        rows[1].6 = SwitchMode::Op;
        rows[2].6 = SwitchMode::Po;
        rows[3].6 = SwitchMode::Po;
        let traj = traj_from(&rows);
        let m = compute_metrics(&traj, 180.0, &cfg(), (-60.0, 60.0)).unwrap();
        assert_eq!(m.switch_count, 1);
        assert_eq!(m.n_sa, 1);
        assert_eq!(m.n_sb, 1);
        assert_eq!(m.n_trans_total, 2);
        assert!((m.switch_freq - 1.0 / (4.0 * TS)).abs() < 1e-6);
    }

    #[test]
    fn energy_sums_use_the_rectangle_rule() {
        let n = 1000;
        let traj = traj_from(&perfect_rows(n));
        let m = compute_metrics(&traj, 180.0, &cfg(), (-60.0, 60.0)).unwrap();
        let t_total = n as f64 * TS;
        // i_L = 7.5 A at V_in = 120 V: input power 900 W
        assert!((m.e_in - 900.0 * t_total).abs() < 1e-9);
        // v_o·i_o = 180·5 = 900 W as well, so unit efficiency
        assert!((m.e_out - 900.0 * t_total).abs() < 1e-9);
        assert!((m.eff_avg - 1.0).abs() < 1e-12);
        assert!((m.p_out_avg - 900.0).abs() < 1e-9);
    }

    #[test]
    fn settling_time_is_the_last_band_exit() {
        let mut rows = perfect_rows(6);
        rows[1].2 = 200.0;
        rows[3].2 = 171.0; // below 0.98·180 = 176.4
        let traj = traj_from(&rows);
        let m = compute_metrics(&traj, 180.0, &cfg(), (-60.0, 60.0)).unwrap();
        assert!((m.t_set_vo - 3.0 * TS).abs() < 1e-18);
    }

    #[test]
    fn violation_counter_uses_the_hard_interval() {
        let mut rows = perfect_rows(5);
        rows[2].0 = 61.0;
        rows[4].0 = -61.0;
        let traj = traj_from(&rows);
        let m = compute_metrics(&traj, 180.0, &cfg(), (-60.0, 60.0)).unwrap();
        assert_eq!(m.n_il_viol, 2);
    }

    #[test]
    fn realized_cost_is_additive_over_segments() {
        let mut rows = perfect_rows(8);
        for (k, row) in rows.iter_mut().enumerate() {
            row.0 = 7.5 + k as f64 * 0.3;
            row.1 = 90.0 - k as f64 * 0.5;
        }
        let full = traj_from(&rows);
        let head = traj_from(&rows[..3]);
        let tail = traj_from(&rows[3..]);
        let c = cfg();
        let m_full = compute_metrics(&full, 180.0, &c, (-60.0, 60.0)).unwrap();
        let m_head = compute_metrics(&head, 180.0, &c, (-60.0, 60.0)).unwrap();
        let m_tail = compute_metrics(&tail, 180.0, &c, (-60.0, 60.0)).unwrap();
        assert!(m_full.j_sum >= 0.0);
        assert!((m_full.j_sum - (m_head.j_sum + m_tail.j_sum)).abs() < 1e-9);
        assert!((m_full.j_mean - m_full.j_sum / 8.0).abs() < 1e-15);
    }

    #[test]
    fn short_episodes_scale_the_ripple_window() {
        let traj = traj_from(&perfect_rows(10)); // 200 µs episode
        let m = compute_metrics(&traj, 180.0, &cfg(), (-60.0, 60.0)).unwrap();
        assert!((m.ripple_window_start - 0.8 * traj.duration()).abs() < 1e-15);
        assert_eq!(m.ripple_vo, 0.0);
    }

    #[test]
    fn penalties_vanish_while_inside_the_five_percent_band() {
        // any trace confined to [0.95, 1.05]·V_ref accrues no band penalty
        let mut rows = perfect_rows(50);
        for (k, row) in rows.iter_mut().enumerate() {
            row.2 = 180.0 + 8.9 * ((k as f64 * 0.7).sin()); // stays within ±9 V
        }
        let traj = traj_from(&rows);
        let m = compute_metrics(&traj, 180.0, &cfg(), (-60.0, 60.0)).unwrap();
        assert_eq!(m.penalty_over, 0.0);
        assert_eq!(m.penalty_sag, 0.0);
        assert!(m.overshoot_vo > 0.0);
    }

    #[test]
    fn empty_trajectory_is_an_error() {
        let traj = Trajectory { ts: TS, records: vec![] };
        assert!(compute_metrics(&traj, 180.0, &cfg(), (-60.0, 60.0)).is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let traj = traj_from(&perfect_rows(4));
        let m = compute_metrics(&traj, 180.0, &cfg(), (-60.0, 60.0)).unwrap();
        let back = MetricsReport::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
    }
}
