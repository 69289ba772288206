//! Uniformly sampled signals, finite-difference windows, and the snap-limited
//! point-to-point reference trajectory.
//!
//! Time indices follow the 1-based convention `k = 1..=N`; samples before the
//! first one read as zero (all experiments start from rest).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Uniformly sampled scalar signal with sample time `ts`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    values: Vec<f64>,
    ts: f64,
}

impl Signal {
    pub fn new(values: Vec<f64>, ts: f64) -> Result<Self> {
        if !(ts.is_finite() && ts > 0.0) {
            return Err(Error::InvalidSignal(format!("sample time {ts} must be positive")));
        }
        if values.is_empty() {
            return Err(Error::InvalidSignal("signal must hold at least one sample".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal(format!("non-finite sample at index {}", i + 1)));
        }
        Ok(Signal { values, ts })
    }

    pub fn zeros(n: usize, ts: f64) -> Result<Self> {
        Signal::new(vec![0.0; n], ts)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty signals
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sample at 1-based index `k`; indices at or below zero read as 0.
    pub fn at(&self, k: i64) -> f64 {
        if k < 1 {
            0.0
        } else {
            self.values[(k - 1) as usize]
        }
    }

    /// Two-column CSV (`time_s,value`). Values round-trip bit-exactly.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "time_s,value")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", k as f64 * self.ts, v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let bad = |msg: String| Error::MalformedFile { path: path.display().to_string(), msg };
        let reader = BufReader::new(File::open(path)?);
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != "time_s,value" {
                    return Err(bad(format!("unexpected header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let (t, v) = match (parts.next(), parts.next(), parts.next()) {
                (Some(t), Some(v), None) => (t, v),
                _ => return Err(bad(format!("line {} is not two columns", i + 1))),
            };
            let t: f64 = t.trim().parse().map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
            let v: f64 = v.trim().parse().map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
            times.push(t);
            values.push(v);
        }
        if times.len() < 2 {
            return Err(bad("need at least two samples to recover the sample time".into()));
        }
        let ts = times[1] - times[0];
        for (i, w) in times.windows(2).enumerate() {
            if ((w[1] - w[0]) - ts).abs() > 1e-9 * ts.abs().max(1e-12) {
                return Err(bad(format!("non-uniform time grid near line {}", i + 2)));
            }
        }
        Signal::new(values, ts)
    }
}

/// Window `[s(k), s(k-1), ..., s(k-p)]` for 1-based time index `k`.
/// Samples before the start of the signal read as zero.
pub fn delay_line(s: &Signal, k: usize, p: usize) -> Result<Vec<f64>> {
    if k < 1 || k > s.len() {
        return Err(Error::IndexOutOfRange { index: k, len: s.len() });
    }
    Ok((0..=p).map(|i| s.at(k as i64 - i as i64)).collect())
}

/// Backward difference of the given order with zero history before the
/// first sample, scaled by `ts^order`.
pub fn backward_difference(s: &Signal, order: usize) -> Signal {
    // iterate first differences rather than expanding the binomial form:
    // constant stretches then cancel exactly at every stage instead of
    // leaving round-off that the division by ts^order would magnify
    let ts = s.ts();
    let mut values = s.values().to_vec();
    for _ in 0..order {
        let mut prev = 0.0;
        for v in values.iter_mut() {
            let cur = *v;
            *v = (cur - prev) / ts;
            prev = cur;
        }
    }
    Signal::new(values, ts).expect("difference of a valid signal is valid")
}

/// Fixed input transform mapping a window `[r(k), r(k-1), r(k-2)]` to
/// position, backward-difference velocity, and backward-difference
/// acceleration.
pub fn derivative_basis_matrix(ts: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[
        1.0, 0.0, 0.0,
        1.0 / ts, -1.0 / ts, 0.0,
        1.0 / ts.powi(2), -2.0 / ts.powi(2), 1.0 / ts.powi(2),
    ])
}

/// [`derivative_basis_matrix`] with each row divided by the peak magnitude
/// of the corresponding derivative over `r`, so that transformed inputs are
/// O(1) on the training trajectory. Rows whose peak vanishes are left
/// unscaled.
pub fn scaled_derivative_basis(ts: f64, r: &Signal) -> DMatrix<f64> {
    let mut t = derivative_basis_matrix(ts);
    for order in 0..3usize {
        let peak = backward_difference(r, order)
            .values()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            for col in 0..3 {
                t[(order, col)] /= peak;
            }
        }
    }
    t
}

/// Kinematic limits and geometry of a snap-limited point-to-point move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourthOrderLimits {
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
    pub s_max: f64,
    /// Travel distance; zero requests a constant-zero signal.
    pub stroke: f64,
    /// Rest time before the move starts.
    pub lead_in: f64,
    /// Total signal duration including lead-in and end hold.
    pub total_duration: f64,
}

impl FourthOrderLimits {
    /// Check the kinematic fields only; the timing fields may still be
    /// unset. Useful before [`fourth_order_move_duration`], whose result is
    /// what `total_duration` is usually chosen from.
    pub fn validate_kinematics(&self) -> Result<()> {
        let pos = [
            ("v_max", self.v_max),
            ("a_max", self.a_max),
            ("j_max", self.j_max),
            ("s_max", self.s_max),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidSignal(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.stroke.is_finite() && self.stroke >= 0.0) {
            return Err(Error::InvalidSignal(format!(
                "stroke must be non-negative, got {}",
                self.stroke
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_kinematics()?;
        if !(self.total_duration.is_finite() && self.total_duration > 0.0) {
            return Err(Error::InvalidSignal(format!(
                "total_duration must be positive, got {}",
                self.total_duration
            )));
        }
        if !(self.lead_in.is_finite() && self.lead_in >= 0.0) {
            return Err(Error::InvalidSignal(format!(
                "lead_in must be non-negative, got {}",
                self.lead_in
            )));
        }
        Ok(())
    }
}

/// Segment boundary times of the move: snap pulse, constant-jerk,
/// constant-acceleration, and constant-velocity durations.
#[derive(Debug, Clone, Copy)]
struct ProfileTimes {
    t_s: f64,
    t_j: f64,
    t_a: f64,
    t_v: f64,
}

impl ProfileTimes {
    fn ramp(&self) -> f64 {
        2.0 * self.t_s + self.t_j
    }

    fn accel_phase(&self) -> f64 {
        self.t_a + 2.0 * self.ramp()
    }

    fn move_duration(&self) -> f64 {
        2.0 * self.accel_phase() + self.t_v
    }
}

/// Smallest non-negative root of the increasing function `f(x) = target`,
/// assuming `f(0) <= target`. Bisection after exponential bracketing.
fn increasing_root(f: impl Fn(f64) -> f64, target: f64, mut hi: f64) -> f64 {
    if f(0.0) >= target {
        return 0.0;
    }
    hi = hi.max(1e-12);
    for _ in 0..200 {
        if f(hi) >= target {
            break;
        }
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Saturation cascade: grow the snap pulse until jerk, acceleration,
/// velocity, or the stroke itself binds, then lengthen the constant-jerk,
/// constant-acceleration, and constant-velocity stretches in that order.
fn solve_profile_times(p: f64, v: f64, a: f64, j: f64, s: f64) -> ProfileTimes {
    let t_s = (p / (8.0 * s))
        .powf(0.25)
        .min(j / s)
        .min((a / s).sqrt())
        .min((v / (2.0 * s)).cbrt());

    let by_acc = (a / (s * t_s) - t_s).max(0.0);
    let c_vel = v / (s * t_s);
    let by_vel = 0.5 * (-3.0 * t_s + (t_s * t_s + 4.0 * c_vel).sqrt()).max(0.0);
    let c_pos = p / (2.0 * s * t_s);
    let by_pos = increasing_root(|x| (t_s + x) * (2.0 * t_s + x).powi(2), c_pos, t_s.max(c_pos.cbrt()));
    let t_j = by_acc.min(by_vel).min(by_pos).max(0.0);

    let a_pk = s * t_s * (t_s + t_j);
    let ramp = 2.0 * t_s + t_j;
    let by_vel = (v / a_pk - ramp).max(0.0);
    let by_pos = 0.5 * (-3.0 * ramp + (ramp * ramp + 4.0 * p / a_pk).sqrt()).max(0.0);
    let t_a = by_vel.min(by_pos).max(0.0);

    let v_pk = a_pk * (ramp + t_a);
    let t_v = (p / v_pk - (t_a + 2.0 * ramp)).max(0.0);

    ProfileTimes { t_s, t_j, t_a, t_v }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    t0: f64,
    dt: f64,
    snap: f64,
    p0: f64,
    v0: f64,
    a0: f64,
    j0: f64,
}

fn build_segments(times: &ProfileTimes, s_max: f64, p: f64) -> Vec<Segment> {
    let ProfileTimes { t_s, t_j, t_a, t_v } = *times;
    let pattern = [
        (t_s, s_max),
        (t_j, 0.0),
        (t_s, -s_max),
        (t_a, 0.0),
        (t_s, -s_max),
        (t_j, 0.0),
        (t_s, s_max),
        (t_v, 0.0),
        (t_s, -s_max),
        (t_j, 0.0),
        (t_s, s_max),
        (t_a, 0.0),
        (t_s, s_max),
        (t_j, 0.0),
        (t_s, -s_max),
    ];
    let mut segs = Vec::with_capacity(pattern.len());
    let (mut t0, mut p0, mut v0, mut a0, mut j0) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (dt, snap) in pattern {
        segs.push(Segment { t0, dt, snap, p0, v0, a0, j0 });
        p0 += v0 * dt + a0 * dt * dt / 2.0 + j0 * dt.powi(3) / 6.0 + snap * dt.powi(4) / 24.0;
        v0 += a0 * dt + j0 * dt * dt / 2.0 + snap * dt.powi(3) / 6.0;
        a0 += j0 * dt + snap * dt * dt / 2.0;
        j0 += snap * dt;
        t0 += dt;
    }
    debug_assert!((p0 - p).abs() <= 1e-9 * p.max(1.0), "profile misses stroke: {p0} vs {p}");
    segs
}

fn eval_segments(segs: &[Segment], t: f64) -> f64 {
    for seg in segs {
        if t < seg.t0 + seg.dt {
            let tau = t - seg.t0;
            return seg.p0
                + seg.v0 * tau
                + seg.a0 * tau * tau / 2.0
                + seg.j0 * tau.powi(3) / 6.0
                + seg.snap * tau.powi(4) / 24.0;
        }
    }
    segs.last().map_or(0.0, |s| {
        let tau = s.dt;
        s.p0 + s.v0 * tau + s.a0 * tau * tau / 2.0 + s.j0 * tau.powi(3) / 6.0
            + s.snap * tau.powi(4) / 24.0
    })
}

/// Duration of the move itself (excluding lead-in and end hold) under the
/// given limits.
pub fn fourth_order_move_duration(limits: &FourthOrderLimits) -> Result<f64> {
    limits.validate_kinematics()?;
    if limits.stroke == 0.0 {
        return Ok(0.0);
    }
    let t = solve_profile_times(limits.stroke, limits.v_max, limits.a_max, limits.j_max, limits.s_max);
    Ok(t.move_duration())
}

/// Snap-limited point-to-point reference: rest at 0 for `lead_in`, a
/// symmetric bang-bang-snap move over `stroke`, then rest at `stroke` until
/// `total_duration`. Sampled derivatives up to fourth order stay inside the
/// configured limits.
pub fn make_fourth_order_reference(limits: &FourthOrderLimits, ts: f64) -> Result<Signal> {
    limits.validate()?;
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::InvalidSignal(format!("sample time {ts} must be positive")));
    }
    let n = (limits.total_duration / ts).round() as usize;
    if n < 1 {
        return Err(Error::InvalidSignal("total_duration shorter than one sample".into()));
    }
    if limits.stroke == 0.0 {
        return Signal::zeros(n, ts);
    }
    let times = solve_profile_times(limits.stroke, limits.v_max, limits.a_max, limits.j_max, limits.s_max);
    let t_move = times.move_duration();
    // Four hold samples at the end keep the sampled derivatives zero there.
    if limits.lead_in + t_move + 4.0 * ts > limits.total_duration {
        return Err(Error::InfeasibleProfile(format!(
            "move of {:.4} s plus lead-in {:.4} s does not fit in {:.4} s",
            t_move, limits.lead_in, limits.total_duration
        )));
    }
    let segs = build_segments(&times, limits.s_max, limits.stroke);
    let values = (0..n)
        .map(|k| {
            let tau = k as f64 * ts - limits.lead_in;
            if tau <= 0.0 {
                0.0
            } else if tau >= t_move {
                limits.stroke
            } else {
                eval_segments(&segs, tau)
            }
        })
        .collect();
    Signal::new(values, ts)
}
