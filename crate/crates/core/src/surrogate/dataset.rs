//! Training samples: sampling of initial states, labelling and CSV storage.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::SimParams;
use crate::pmp::{extract_sample, solve_pmp, GradientSolverConfig};
use crate::sdre::{flatten_agents, sdre_sample, unflatten_state};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub state: DVector<f64>,
    pub u_label: DVector<f64>,
    pub v_label: f64,
    pub gradv_label: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub n_agents: usize,
    pub dim: usize,
    pub samples: Vec<TrainingSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LabelerKind {
    Pmp,
    Sdre,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labeler {
    Pmp(GradientSolverConfig),
    Sdre,
}

impl Labeler {
    pub fn kind(&self) -> LabelerKind {
        match self {
            Labeler::Pmp(_) => LabelerKind::Pmp,
            Labeler::Sdre => LabelerKind::Sdre,
        }
    }
}

/// Axis-aligned sampling box `[lo, hi]` shared by every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub lo: f64,
    pub hi: f64,
}

impl SampleBox {
    pub const UNIT: SampleBox = SampleBox { lo: 0.0, hi: 1.0 };
    pub const SYMMETRIC: SampleBox = SampleBox { lo: -1.0, hi: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::InvalidInput(format!("invalid box [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

/// I.i.d. uniform flat states: positions then velocities, each sample drawn
/// from its own stream of the seeded generator.
pub fn sample_states(
    count: usize,
    n_agents: usize,
    dim: usize,
    positions: SampleBox,
    velocities: SampleBox,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    positions.validate()?;
    velocities.validate()?;
    if count == 0 || n_agents == 0 || dim == 0 {
        return Err(Error::InvalidInput("count, N and d must be >= 1".into()));
    }
    let nd = n_agents * dim;
    Ok((0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            DVector::from_fn(2 * nd, |i, _| {
                let b = if i < nd { positions } else { velocities };
                rng.gen_range(b.lo..b.hi)
            })
        })
        .collect())
}

fn label_one(state: &DVector<f64>, n: usize, d: usize, labeler: &Labeler, params: &SimParams) -> Result<TrainingSample> {
    let s = unflatten_state(state, n, d, 0.0)?;
    let (u, v, g) = match labeler {
        Labeler::Sdre => sdre_sample(&s, params)?,
        Labeler::Pmp(cfg) => {
            let sol = solve_pmp(&s, params, cfg)?;
            if !sol.converged {
                return Err(Error::InvalidInput("open-loop solve did not converge".into()));
            }
            extract_sample(&sol)
        }
    };
    let sample = TrainingSample {
        state: state.clone(),
        u_label: flatten_agents(&u),
        v_label: v,
        gradv_label: g,
    };
    let finite = sample.u_label.iter().chain(sample.gradv_label.iter()).all(|x| x.is_finite()) && v.is_finite();
    if !finite || v < 0.0 {
        return Err(Error::InvalidInput("non-finite or negative label".into()));
    }
    Ok(sample)
}

/// Labels every state independently. Failed solves are dropped and counted.
pub fn generate_dataset(
    states: &[DVector<f64>],
    n_agents: usize,
    dim: usize,
    labeler: &Labeler,
    params: &SimParams,
) -> Result<(Dataset, usize)> {
    params.validate()?;
    let results: Vec<Result<TrainingSample>> = states
        .par_iter()
        .map(|s| label_one(s, n_agents, dim, labeler, params))
        .collect();
    let mut dropped = 0;
    let mut samples = Vec::with_capacity(states.len());
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("dropping sample: {e}");
                dropped += 1;
            }
        }
    }
    Ok((
        Dataset {
            n_agents,
            dim,
            samples,
        },
        dropped,
    ))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_agents * self.dim
    }

    /// Column matrices `(states, u, V, grad V)` for the selected samples.
    pub fn columns(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let sd = self.state_dim();
        let cd = sd / 2;
        let mut s = DMatrix::zeros(sd, idx.len());
        let mut u = DMatrix::zeros(cd, idx.len());
        let mut v = DMatrix::zeros(1, idx.len());
        let mut g = DMatrix::zeros(sd, idx.len());
        for (c, &i) in idx.iter().enumerate() {
            let smp = &self.samples[i];
            s.set_column(c, &smp.state);
            u.set_column(c, &smp.u_label);
            v[(0, c)] = smp.v_label;
            g.set_column(c, &smp.gradv_label);
        }
        (s, u, v, g)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let sd = self.state_dim();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let header: Vec<String> = (1..=sd)
            .map(|i| format!("s_{i}"))
            .chain((1..=sd / 2).map(|i| format!("u_{i}")))
            .chain(std::iter::once("V".to_string()))
            .chain((1..=sd).map(|i| format!("gV_{i}")))
            .collect();
        w.write_record(&header)?;
        for smp in &self.samples {
            let row: Vec<String> = smp
                .state
                .iter()
                .chain(smp.u_label.iter())
                .chain(std::iter::once(&smp.v_label))
                .chain(smp.gradv_label.iter())
                .map(|x| x.to_string())
                .collect();
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a dataset file; `N` comes from the caller since only `dN` is
    /// recoverable from the header.
    pub fn read_csv(path: impl AsRef<Path>, n_agents: usize) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let cols = r.headers()?.len();
        // 2dN + dN + 1 + 2dN columns.
        if cols < 6 || (cols - 1) % 5 != 0 {
            return Err(Error::Parse(format!("dataset header has {cols} columns")));
        }
        let nd = (cols - 1) / 5;
        if n_agents == 0 || nd % n_agents != 0 {
            return Err(Error::Parse(format!("dN = {nd} is not a multiple of N = {n_agents}")));
        }
        let mut ds = Dataset {
            n_agents,
            dim: nd / n_agents,
            samples: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{c:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            ds.samples.push(TrainingSample {
                state: DVector::from_column_slice(&vals[..2 * nd]),
                u_label: DVector::from_column_slice(&vals[2 * nd..3 * nd]),
                v_label: vals[3 * nd],
                gradv_label: DVector::from_column_slice(&vals[3 * nd + 1..]),
            });
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_stay_in_box_and_are_deterministic() {
        let a = sample_states(50, 3, 2, SampleBox::UNIT, SampleBox::SYMMETRIC, 4).unwrap();
        let b = sample_states(50, 3, 2, SampleBox::UNIT, SampleBox::SYMMETRIC, 4).unwrap();
        let c = sample_states(50, 3, 2, SampleBox::UNIT, SampleBox::SYMMETRIC, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for s in &a {
            assert!(s.rows(0, 6).iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!(s.rows(6, 6).iter().all(|&x| (-1.0..=1.0).contains(&x)));
        }
        assert!(sample_states(0, 3, 2, SampleBox::UNIT, SampleBox::UNIT, 0).is_err());
        assert!(sample_states(1, 3, 2, SampleBox { lo: 1.0, hi: 0.0 }, SampleBox::UNIT, 0).is_err());
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let count = 10_000;
        let s = sample_states(count, 2, 1, SampleBox::UNIT, SampleBox::SYMMETRIC, 17).unwrap();
        for i in 0..4 {
            let mean = s.iter().map(|x| x[i]).sum::<f64>() / count as f64;
            let (center, width) = if i < 2 { (0.5, 1.0) } else { (0.0, 2.0) };
            let bound = 3.0 * width / (12.0 * count as f64).sqrt();
            assert!((mean - center).abs() <= bound, "coordinate {i}: {mean}");
        }
    }

    #[test]
    fn consensus_states_get_zero_labels() {
        let params = SimParams::new(0.1, 1.0, 0.01);
        let state = DVector::from_vec(vec![0.1, 0.9, 0.4, 0.3, 0.3, 0.3]);
        // Labels vanish up to rounding in the mean velocity.
        for labeler in [Labeler::Sdre, Labeler::Pmp(GradientSolverConfig::default())] {
            let (ds, dropped) = generate_dataset(std::slice::from_ref(&state), 3, 1, &labeler, &params).unwrap();
            assert_eq!(dropped, 0);
            let smp = &ds.samples[0];
            assert!(smp.u_label.amax() <= 1e-12);
            assert!(smp.v_label.abs() <= 1e-12);
            assert!(smp.gradv_label.amax() <= 1e-12);
        }
    }

    #[test]
    fn sdre_labels_satisfy_gradient_identity() {
        let params = SimParams::default();
        let states = sample_states(20, 5, 2, SampleBox::UNIT, SampleBox::UNIT, 2).unwrap();
        let (ds, dropped) = generate_dataset(&states, 5, 2, &Labeler::Sdre, &params).unwrap();
        assert_eq!((ds.len(), dropped), (20, 0));
        for smp in &ds.samples {
            assert!(smp.v_label >= 0.0);
            let from_grad = smp.gradv_label.rows(10, 10) * (-5.0 / (2.0 * params.gamma));
            assert!((from_grad - &smp.u_label).amax() <= 1e-10);
        }
    }

    #[test]
    fn csv_round_trip() {
        let params = SimParams::default();
        let states = sample_states(4, 3, 2, SampleBox::UNIT, SampleBox::UNIT, 1).unwrap();
        let (ds, _) = generate_dataset(&states, 3, 2, &Labeler::Sdre, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        assert_eq!(Dataset::read_csv(&path, 3).unwrap(), ds);
        let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert!(header.starts_with("s_1,s_2,"));
        assert!(header.contains(",s_12,u_1,") && header.contains(",u_6,V,gV_1,") && header.ends_with(",gV_12"));
    }
}
