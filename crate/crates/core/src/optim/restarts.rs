//! Sequence of bounded L-BFGS runs with fresh projection directions each.

use crate::error::Result;
use crate::losses::{mix_seed, LossRecord};

use super::lbfgs::{lbfgs_minimize, LbfgsConfig, StepRecord, StopReason};

/// An objective whose stochastic part (the direction set) is fixed per
/// restart.
pub trait RestartProblem {
    fn dim(&self) -> usize;

    /// Called before restart `restart` with its direction seed.
    fn prepare(&mut self, restart: usize, direction_seed: u64) -> Result<()>;

    /// Objective value; writes the gradient.
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Held-out loss records after restart `restart` finished.
    fn monitor(&mut self, x: &[f64], restart: usize) -> Result<Vec<LossRecord>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestartConfig {
    pub restarts: usize,
    pub lbfgs: LbfgsConfig,
    /// Project onto `[0, 1]` after every restart.
    pub clamp_unit: bool,
}

impl Default for RestartConfig {
    fn default() -> Self {
        RestartConfig { restarts: 20, lbfgs: LbfgsConfig::default(), clamp_unit: true }
    }
}

#[derive(Clone, Debug)]
pub struct RestartSummary {
    pub restart: usize,
    pub seed: u64,
    pub evals: usize,
    pub final_loss: f64,
    pub stop: StopReason,
    pub steps: Vec<StepRecord>,
    /// Values moved by the clamp at the end of this restart.
    pub clamped: usize,
}

#[derive(Clone, Debug)]
pub struct OptimRun {
    pub x: Vec<f64>,
    pub seeds: Vec<u64>,
    pub records: Vec<LossRecord>,
    pub restarts: Vec<RestartSummary>,
    pub evals: usize,
}

impl OptimRun {
    /// Whether the clamp after the last restart changed any value.
    pub fn final_clamp_changed(&self) -> bool {
        self.restarts.last().is_some_and(|r| r.clamped > 0)
    }
}

pub fn run_restarts<P: RestartProblem>(problem: &mut P, x0: &[f64], cfg: &RestartConfig, seed: u64) -> Result<OptimRun> {
    cfg.lbfgs.validate()?;
    if x0.len() != problem.dim() {
        return crate::error::invalid_arg(format!("x0 has {} values, problem has {}", x0.len(), problem.dim()));
    }
    let mut run = OptimRun { x: x0.to_vec(), seeds: Vec::new(), records: Vec::new(), restarts: Vec::new(), evals: 0 };
    for r in 0..cfg.restarts {
        let s = mix_seed(seed, r as u64);
        problem.prepare(r, s)?;
        let res = lbfgs_minimize(|x, g| problem.evaluate(x, g), &run.x, &cfg.lbfgs)?;
        run.x = res.x;
        let mut clamped = 0;
        if cfg.clamp_unit {
            for v in run.x.iter_mut() {
                let c = v.clamp(0.0, 1.0);
                if c != *v {
                    clamped += 1;
                    *v = c;
                }
            }
        }
        run.evals += res.evals;
        log::info!("restart {}/{}: loss {:.6e} after {} evals ({:?})", r + 1, cfg.restarts, res.f, res.evals, res.stop);
        run.records.extend(problem.monitor(&run.x, r)?);
        run.seeds.push(s);
        run.restarts.push(RestartSummary {
            restart: r,
            seed: s,
            evals: res.evals,
            final_loss: res.f,
            stop: res.stop,
            steps: res.steps,
            clamped,
        });
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::RecordKind;

    /// `sum (x_i - c_i)^2` with `c` drawn from the restart seed.
    struct Shifting {
        c: Vec<f64>,
        prepared: Vec<u64>,
    }

    impl RestartProblem for Shifting {
        fn dim(&self) -> usize {
            self.c.len()
        }
        fn prepare(&mut self, _restart: usize, seed: u64) -> Result<()> {
            self.prepared.push(seed);
            for (i, c) in self.c.iter_mut().enumerate() {
                *c = 0.25 + 0.5 * ((mix_seed(seed, i as u64) >> 11) as f64 / (1u64 << 53) as f64);
            }
            Ok(())
        }
        fn evaluate(&mut self, x: &[f64], g: &mut [f64]) -> Result<f64> {
            let mut f = 0.0;
            for i in 0..x.len() {
                g[i] = 2.0 * (x[i] - self.c[i]);
                f += (x[i] - self.c[i]).powi(2);
            }
            Ok(f)
        }
        fn monitor(&mut self, x: &[f64], restart: usize) -> Result<Vec<LossRecord>> {
            Ok(vec![LossRecord {
                step: restart,
                loss_total: x.iter().sum(),
                loss_per_layer: vec![],
                kind: RecordKind::MonitorSw,
                seed: 0,
                wall_time_s: 0.0,
            }])
        }
    }

    #[test]
    fn one_restart_is_one_minimize_plus_one_record() {
        let mut p = Shifting { c: vec![0.0; 4], prepared: vec![] };
        let cfg = RestartConfig { restarts: 1, clamp_unit: false, ..Default::default() };
        let run = run_restarts(&mut p, &[0.0; 4], &cfg, 9).unwrap();
        assert_eq!(run.records.len(), 1);
        let mut q = Shifting { c: vec![0.0; 4], prepared: vec![] };
        q.prepare(0, mix_seed(9, 0)).unwrap();
        let direct = lbfgs_minimize(|x, g| q.evaluate(x, g), &[0.0; 4], &cfg.lbfgs).unwrap();
        assert_eq!(run.x, direct.x);
        assert_eq!(run.evals, direct.evals);
        assert_eq!(p.prepared, vec![mix_seed(9, 0)]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = RestartConfig { restarts: 3, ..Default::default() };
        let mut a = Shifting { c: vec![0.0; 5], prepared: vec![] };
        let mut b = Shifting { c: vec![0.0; 5], prepared: vec![] };
        let ra = run_restarts(&mut a, &[2.0; 5], &cfg, 77).unwrap();
        let rb = run_restarts(&mut b, &[2.0; 5], &cfg, 77).unwrap();
        assert_eq!(ra.x, rb.x);
        assert_eq!(ra.seeds, rb.seeds);
        assert_eq!(ra.records, rb.records);
        assert_eq!(ra.seeds.len(), 3);
        assert!(ra.seeds[0] != ra.seeds[1]);
    }

    #[test]
    fn clamp_is_reported() {
        let mut p = Shifting { c: vec![0.0; 2], prepared: vec![] };
        // one evaluation: x stays at the out-of-range start
        let cfg = RestartConfig {
            restarts: 1,
            clamp_unit: true,
            lbfgs: LbfgsConfig { max_evals: 1, ..Default::default() },
        };
        let run = run_restarts(&mut p, &[1.5, -0.5], &cfg, 0).unwrap();
        assert_eq!(run.x, vec![1.0, 0.0]);
        assert!(run.final_clamp_changed());
    }
}
