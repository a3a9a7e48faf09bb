//! Source-guided reverse diffusion.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::braingraph::{pairing_edges, BrainGraph, FeatureScaler};
use crate::denoiser::{predict_noise_eval, DenoiserInput, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::schedule::{sample_noise, NoiseSchedule};

/// Per-step states of one reverse trajectory, `t = T` down to `1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleTrace {
    pub steps: Vec<(usize, Vec<f64>)>,
}

impl SampleTrace {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let n = self.steps.first().map_or(0, |(_, v)| v.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("node_{i}")));
        w.write_record(&header)?;
        for (t, values) in &self.steps {
            let mut row = vec![t.to_string()];
            row.extend(values.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reverse-process mean:
/// `μ = (n_t - (1 - α_t) / sqrt(1 - ᾱ_t) · ε̂) / sqrt(α_t)`.
pub fn mu_theta(
    n_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if n_t.len() != eps_hat.len() {
        return Err(Error::ShapeMismatch {
            op: "mu_theta",
            lhs: vec![n_t.len()],
            rhs: vec![eps_hat.len()],
        });
    }
    let alpha = schedule.alpha(t);
    let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    Ok(n_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| inv * (x - coef * e))
        .collect())
}

fn posterior_step<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    n_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut mean = mu_theta(n_t, t, eps_hat, schedule)?;
    if t > 1 {
        let sigma = schedule.sigma(t);
        let z = sample_noise(rng, mean.len(), schedule.k());
        mean.iter_mut().zip(z).for_each(|(m, z)| *m += sigma * z);
    }
    Ok(mean)
}

/// Runs `t = T..1` from `start` with an arbitrary noise predictor:
/// `n_{t-1} = μ(n_t, t, ε̂) + σ_t·z`, `z ~ N(0, k²)`, no noise at `t = 1`.
pub fn reverse_chain<R, F>(
    schedule: &NoiseSchedule,
    start: Vec<f64>,
    rng: &mut R,
    mut trace: Option<&mut SampleTrace>,
    mut predict: F,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut n = start;
    for t in (1..=schedule.steps()).rev() {
        if let Some(tr) = trace.as_deref_mut() {
            tr.steps.push((t, n.clone()));
        }
        let eps_hat = predict(&n, t)?;
        n = posterior_step(schedule, &n, t, &eps_hat, rng)?;
    }
    Ok(n)
}

/// Everything needed to run the reverse chain for one model.
#[derive(Debug)]
pub struct Sampler<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
    pub schedule: &'a NoiseSchedule,
    pub scaler: Option<&'a FeatureScaler>,
    pub target_metric: &'a str,
    calls: AtomicUsize,
}

impl<'a> Sampler<'a> {
    pub fn new(
        params: &'a ModelParams,
        config: &'a ModelConfig,
        schedule: &'a NoiseSchedule,
        scaler: Option<&'a FeatureScaler>,
        target_metric: &'a str,
    ) -> Self {
        Sampler {
            params,
            config,
            schedule,
            scaler,
            target_metric,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of denoiser evaluations made so far.
    pub fn denoiser_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn predict(&self, n_t: &[f64], t: usize, src: &BrainGraph) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let noisy = [n_t.to_vec()];
        let sources = [src];
        let input = DenoiserInput {
            noisy: &noisy,
            timesteps: &[t],
            sources: &sources,
        };
        let mut out = predict_noise_eval(self.params, self.config, &input)?;
        Ok(out.pop().expect("batch of one"))
    }

    /// `n_{t-1} = μ(n_t, t, ε̂) + σ_t·z` with `z ~ N(0, k²)`; no noise at `t = 1`.
    pub fn reverse_step<R: Rng + ?Sized>(
        &self,
        n_t: &[f64],
        t: usize,
        src: &BrainGraph,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.schedule.check_t(t)?;
        let eps_hat = self.predict(n_t, t, src)?;
        posterior_step(self.schedule, n_t, t, &eps_hat, rng)
    }

    /// Scaled node features after the full reverse chain from `N(0, k²)`.
    pub fn sample_nodes<R: Rng + ?Sized>(
        &self,
        src: &BrainGraph,
        rng: &mut R,
        trace: Option<&mut SampleTrace>,
    ) -> Result<Vec<f64>> {
        let start = sample_noise(rng, self.config.node_count, self.schedule.k());
        reverse_chain(self.schedule, start, rng, trace, |n_t, t| {
            self.predict(n_t, t, src)
        })
    }

    /// Samples target node features, maps them back to raw units inside the
    /// fitted range and rebuilds the edges.
    pub fn sample_target<R: Rng + ?Sized>(
        &self,
        src: &BrainGraph,
        rng: &mut R,
        trace: Option<&mut SampleTrace>,
    ) -> Result<BrainGraph> {
        let scaler = self
            .scaler
            .ok_or_else(|| Error::InvalidArgument("sampling requires a fitted scaler".into()))?;
        let n0 = self.sample_nodes(src, rng, trace)?;
        if let Some(i) = n0.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "reverse chain for {} produced a non-finite value at node {i}",
                src.subject_id
            )));
        }
        let scaled: Vec<f64> = n0.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let raw = scaler.inverse_all(self.target_metric, &scaled)?;
        let adjacency = pairing_edges(&raw)?;
        Ok(BrainGraph {
            subject_id: src.subject_id.clone(),
            hemisphere: src.hemisphere,
            metric: self.target_metric.to_string(),
            raw_nodes: raw,
            scaled_nodes: scaled,
            adjacency,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::braingraph::{pairing_edges, Hemisphere, MetricRange};
    use crate::denoiser::init_params;
    use crate::schedule::{cosine_schedule, DiffusionMode, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule(mode: DiffusionMode) -> NoiseSchedule {
        cosine_schedule(ScheduleConfig {
            mode,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_noise_recovers_x0_at_t1() {
        let s = schedule(DiffusionMode::Standard);
        let x0 = [0.2, 0.7, 0.45];
        let eps = [0.013, -0.004, 0.02];
        let n1 = s.forward_diffuse(&x0, 1, &eps).unwrap();
        let mu = mu_theta(&n1.values, 1, &eps, &s).unwrap();
        for (a, b) in mu.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mu_with_zero_noise_rescales() {
        let s = schedule(DiffusionMode::Paper);
        let mu = mu_theta(&[1.0, -2.0], 40, &[0.0, 0.0], &s).unwrap();
        let inv = 1.0 / s.alpha(40).sqrt();
        assert_eq!(mu, vec![inv, -2.0 * inv]);
        assert!(mu_theta(&[1.0], 0, &[0.0], &s).is_err());
        assert!(mu_theta(&[1.0], 101, &[0.0], &s).is_err());
        assert!(mu_theta(&[1.0, 2.0], 3, &[0.0], &s).is_err());
    }

    #[test]
    fn mu_is_linear() {
        let s = schedule(DiffusionMode::Paper);
        let (a, b) = ([0.3, -0.1], [0.05, 0.2]);
        let (e, f) = ([0.01, 0.02], [-0.03, 0.5]);
        let lhs = mu_theta(
            &[a[0] + 2.0 * b[0], a[1] + 2.0 * b[1]],
            17,
            &[e[0] + 2.0 * f[0], e[1] + 2.0 * f[1]],
            &s,
        )
        .unwrap();
        let ma = mu_theta(&a, 17, &e, &s).unwrap();
        let mb = mu_theta(&b, 17, &f, &s).unwrap();
        for i in 0..2 {
            assert!((lhs[i] - (ma[i] + 2.0 * mb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_chain_with_oracle_denoiser_lands_on_x0() {
        let s = schedule(DiffusionMode::Standard);
        let x0 = vec![0.1, 0.4, 0.9, 0.55];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = sample_noise(&mut rng, 4, s.k());
        let out = reverse_chain(&s, start, &mut rng, None, |n, t| {
            let ab = s.alpha_bar(t);
            Ok(n.iter()
                .zip(&x0)
                .map(|(v, x)| (v - ab.sqrt() * x) / (1.0 - ab).sqrt())
                .collect())
        })
        .unwrap();
        for (a, b) in out.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    fn setup() -> (ModelConfig, ModelParams, FeatureScaler, BrainGraph) {
        let cfg = ModelConfig {
            conv_dim: 4,
            fc_dim: 8,
            pe_dim: 8,
            node_count: 5,
            ..Default::default()
        };
        let params = init_params(&cfg, 1).unwrap();
        let scaler = FeatureScaler::from_ranges([
            ("c".to_string(), MetricRange { min: 0.0, max: 2.0 }),
            ("h".to_string(), MetricRange { min: 1.0, max: 4.0 }),
        ])
        .unwrap();
        let raw = vec![0.2, 0.5, 1.1, 1.9, 0.7];
        let src = BrainGraph {
            subject_id: "x".into(),
            hemisphere: Hemisphere::Lh,
            metric: "c".into(),
            scaled_nodes: scaler.transform_all("c", &raw).unwrap(),
            adjacency: pairing_edges(&raw).unwrap(),
            raw_nodes: raw,
        };
        (cfg, params, scaler, src)
    }

    #[test]
    fn one_sample_costs_t_denoiser_calls() {
        let (cfg, params, scaler, src) = setup();
        let s = schedule(DiffusionMode::Paper);
        let sampler = Sampler::new(&params, &cfg, &s, Some(&scaler), "h");
        let mut trace = SampleTrace::default();
        let g = sampler
            .sample_target(&src, &mut ChaCha8Rng::seed_from_u64(0), Some(&mut trace))
            .unwrap();
        assert_eq!(sampler.denoiser_calls(), 100);
        assert_eq!(trace.steps.len(), 100);
        assert_eq!(trace.steps[0].0, 100);
        assert!(g.adjacency.is_symmetric_hollow());
        assert!(g.raw_nodes.iter().all(|v| (1.0..=4.0).contains(v)));
        assert!(g
            .adjacency
            .as_slice()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_sample() {
        let (cfg, params, scaler, src) = setup();
        let s = schedule(DiffusionMode::Paper);
        let sampler = Sampler::new(&params, &cfg, &s, Some(&scaler), "h");
        let a = sampler
            .sample_target(&src, &mut ChaCha8Rng::seed_from_u64(5), None)
            .unwrap();
        let b = sampler
            .sample_target(&src, &mut ChaCha8Rng::seed_from_u64(5), None)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_scaler_is_an_error() {
        let (cfg, params, _, src) = setup();
        let s = schedule(DiffusionMode::Paper);
        let sampler = Sampler::new(&params, &cfg, &s, None, "h");
        assert!(sampler
            .sample_target(&src, &mut ChaCha8Rng::seed_from_u64(5), None)
            .is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let trace = SampleTrace {
            steps: vec![(2, vec![0.5, 0.25]), (1, vec![0.125, 1.0])],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        trace.write_csv(&p).unwrap();
        assert_eq!(
            std::fs::read_to_string(p).unwrap(),
            "t,node_0,node_1\n2,0.5,0.25\n1,0.125,1\n"
        );
    }
}
