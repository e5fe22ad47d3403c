//! Discrete knot trajectories with second-order cliques.
//!
//! A trajectory over horizon `T` holds `T + 2` knots: knot 0 is anchored to the
//! latest observation, knots `1..=T` are the clique centres and knot `T + 1`
//! closes the last clique.

use std::io::Write;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_HORIZON: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    knots: Vec<DVector<f64>>,
    dt: f64,
}

/// Three consecutive knots and their central-difference derivatives.
#[derive(Debug, Clone, Copy)]
pub struct Clique<'a> {
    pub prev: &'a DVector<f64>,
    pub cur: &'a DVector<f64>,
    pub next: &'a DVector<f64>,
    pub dt: f64,
}

impl Clique<'_> {
    pub fn velocity(&self) -> DVector<f64> {
        (self.next - self.prev) / (2.0 * self.dt)
    }

    pub fn acceleration(&self) -> DVector<f64> {
        (self.next - self.cur * 2.0 + self.prev) / (self.dt * self.dt)
    }
}

impl Trajectory {
    pub fn new(knots: Vec<DVector<f64>>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
        }
        if knots.len() < 2 {
            return Err(Error::TooShort { horizon: 0 });
        }
        let dim = knots[0].len();
        for k in &knots {
            check_dim(dim, k.len())?;
        }
        Ok(Self { knots, dt })
    }

    /// `horizon + 2` copies of `q`.
    pub fn constant(q: &DVector<f64>, horizon: usize, dt: f64) -> Result<Self> {
        Self::new(vec![q.clone(); horizon + 2], dt)
    }

    /// Builds a trajectory from the clique centres plus the two boundary knots.
    pub fn from_interior(
        anchor: DVector<f64>,
        interior: Vec<DVector<f64>>,
        terminal: DVector<f64>,
        dt: f64,
    ) -> Result<Self> {
        let mut knots = Vec::with_capacity(interior.len() + 2);
        knots.push(anchor);
        knots.extend(interior);
        knots.push(terminal);
        Self::new(knots, dt)
    }

    pub fn knots(&self) -> &[DVector<f64>] {
        &self.knots
    }

    pub fn knots_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.knots
    }

    pub fn knot(&self, i: usize) -> &DVector<f64> {
        &self.knots[i]
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.knots[0].len()
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Number of optimized interior steps `T`.
    pub fn horizon(&self) -> usize {
        self.knots.len().saturating_sub(2)
    }

    pub fn cliques(&self) -> Result<Vec<Clique<'_>>> {
        if self.horizon() < 1 {
            return Err(Error::TooShort { horizon: self.horizon() });
        }
        Ok(self
            .knots
            .windows(3)
            .map(|w| Clique { prev: &w[0], cur: &w[1], next: &w[2], dt: self.dt })
            .collect())
    }

    /// Receding-horizon warm start: drop the first knot, duplicate the last,
    /// and overwrite the anchor with the new observation.
    pub fn time_shift_warm_start(&self, observed_q0: &DVector<f64>) -> Result<Self> {
        check_dim(self.dim(), observed_q0.len())?;
        let mut knots: Vec<DVector<f64>> = self.knots[1..].to_vec();
        knots.push(self.knots[self.knots.len() - 1].clone());
        knots[0] = observed_q0.clone();
        Ok(Self { knots, dt: self.dt })
    }

    /// Writes `step,time,c0,c1,...` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "time".to_string()];
        header.extend((0..self.dim()).map(|i| format!("c{i}")));
        w.write_record(&header)?;
        for (i, k) in self.knots.iter().enumerate() {
            let mut row = vec![i.to_string(), format!("{}", i as f64 * self.dt)];
            row.extend(k.iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut knots = Vec::new();
        let mut times = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| Error::Invalid(format!("bad trajectory csv: {e}")))?;
            if vals.is_empty() {
                return Err(Error::Invalid("trajectory csv row without time".into()));
            }
            times.push(vals[0]);
            knots.push(DVector::from_row_slice(&vals[1..]));
        }
        let dt = if times.len() >= 2 { times[1] - times[0] } else { DEFAULT_DT };
        Self::new(knots, dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_traj(f: impl Fn(f64) -> f64, n: usize, dt: f64) -> Trajectory {
        Trajectory::new((0..n).map(|i| DVector::from_element(1, f(i as f64 * dt))).collect(), dt).unwrap()
    }

    #[test]
    fn constant_trajectory_has_zero_derivatives() {
        let t = Trajectory::constant(&DVector::from_row_slice(&[0.3, -1.0]), 5, 0.1).unwrap();
        let c = t.cliques().unwrap();
        assert_eq!(c.len(), 5);
        for cl in c {
            assert_eq!(cl.velocity().norm(), 0.0);
            assert_eq!(cl.acceleration().norm(), 0.0);
        }
    }

    #[test]
    fn ramp_has_exact_velocity() {
        let t = scalar_traj(|s| 0.7 * s, 8, 0.1);
        for cl in t.cliques().unwrap() {
            assert!((cl.velocity()[0] - 0.7).abs() < 1e-12);
            assert!(cl.acceleration()[0].abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_has_exact_acceleration() {
        let t = scalar_traj(|s| 0.5 * 2.5 * s * s, 8, 0.1);
        for cl in t.cliques().unwrap() {
            assert!((cl.acceleration()[0] - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn too_short_rejected() {
        let t = Trajectory::new(vec![DVector::zeros(1); 2], 0.1).unwrap();
        assert_eq!(t.cliques().unwrap_err(), Error::TooShort { horizon: 0 });
    }

    #[test]
    fn warm_start_of_constant_is_fixed_point() {
        let c = DVector::from_row_slice(&[1.0, 2.0]);
        let t = Trajectory::constant(&c, 4, 0.1).unwrap();
        assert_eq!(t.time_shift_warm_start(&c).unwrap(), t);
    }

    #[test]
    fn warm_start_shifts_ramp() {
        let t = scalar_traj(|s| s, 6, 0.1);
        let shifted = t.time_shift_warm_start(t.knot(1)).unwrap();
        for i in 0..5 {
            assert_eq!(shifted.knot(i), t.knot(i + 1));
        }
        assert_eq!(shifted.knot(5), t.knot(5));
        assert_eq!(shifted.len(), t.len());
    }

    #[test]
    fn warm_start_only_changes_anchor() {
        let t = scalar_traj(|s| s * s, 6, 0.1);
        let obs = t.knot(1) + DVector::from_element(1, 0.05);
        let shifted = t.time_shift_warm_start(&obs).unwrap();
        assert_eq!(shifted.knot(0), &obs);
        for i in 1..5 {
            assert_eq!(shifted.knot(i), t.knot(i + 1));
        }
    }

    #[test]
    fn warm_start_dimension_checked() {
        let t = scalar_traj(|s| s, 4, 0.1);
        assert!(matches!(
            t.time_shift_warm_start(&DVector::zeros(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let t = scalar_traj(|s| s.sin(), 6, 0.1);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in back.knots().iter().zip(t.knots()) {
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn derivatives_are_linear(
            xs in prop::collection::vec(-5.0f64..5.0, 6),
            ys in prop::collection::vec(-5.0f64..5.0, 6),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mk = |v: &[f64]| Trajectory::new(v.iter().map(|x| DVector::from_element(1, *x)).collect(), 0.1).unwrap();
            let t1 = mk(&xs);
            let t2 = mk(&ys);
            let combo: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            let t3 = mk(&combo);
            for ((c1, c2), c3) in t1.cliques().unwrap().iter().zip(t2.cliques().unwrap()).zip(t3.cliques().unwrap()) {
                let v = a * c1.velocity()[0] + b * c2.velocity()[0];
                let acc = a * c1.acceleration()[0] + b * c2.acceleration()[0];
                prop_assert!((c3.velocity()[0] - v).abs() < 1e-9 * (1.0 + v.abs()));
                prop_assert!((c3.acceleration()[0] - acc).abs() < 1e-7 * (1.0 + acc.abs()));
            }
        }

        #[test]
        fn clique_centres_rebuild_interior(xs in prop::collection::vec(-5.0f64..5.0, 3..12)) {
            let t = Trajectory::new(xs.iter().map(|x| DVector::from_element(1, *x)).collect(), 0.1).unwrap();
            let centres: Vec<DVector<f64>> = t.cliques().unwrap().iter().map(|c| c.cur.clone()).collect();
            let rebuilt = Trajectory::from_interior(t.knot(0).clone(), centres, t.knot(t.len() - 1).clone(), 0.1).unwrap();
            prop_assert_eq!(rebuilt, t);
        }
    }
}
