//! The fixed algorithm registry and a uniform way to run any of its entries.

use std::fmt;
use std::str::FromStr;

use cycbp::cccp::{cccp_minimize, CccpConfig};
use cycbp::oracle::{exact_llrs, exact_marginals};
use cycbp::{run_message_passing, BeliefSet, MlpParams, PairwiseFactorGraph, RunConfig, UpdateRule};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algo {
    Spa,
    SpaMu,
    Cccp,
    CycbpE,
    Cycbp,
    Exact,
}

impl Algo {
    pub const ALL: [Algo; 6] = [Algo::Spa, Algo::SpaMu, Algo::Cccp, Algo::CycbpE, Algo::Cycbp, Algo::Exact];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Spa => "spa",
            Algo::SpaMu => "spa_mu",
            Algo::Cccp => "cccp",
            Algo::CycbpE => "cycbp_e",
            Algo::Cycbp => "cycbp",
            Algo::Exact => "exact",
        }
    }

    /// Message-passing rule of the learned entries.
    pub fn learned_rule(self) -> Option<UpdateRule> {
        match self {
            Algo::CycbpE => Some(UpdateRule::NeuralExtrinsic),
            Algo::Cycbp => Some(UpdateRule::Neural),
            _ => None,
        }
    }

    pub fn is_learned(self) -> bool {
        self.learned_rule().is_some()
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown algorithm `{s}`")))
    }
}

/// Beliefs and single-variable LLRs produced by one algorithm on one graph.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub beliefs: BeliefSet<f64>,
    pub llrs: Vec<f64>,
}

/// A registry entry bound to its settings and, for learned entries, its
/// network.
#[derive(Debug, Clone)]
pub struct Estimator {
    algo: Algo,
    params: Option<MlpParams<f64>>,
    mu: f64,
    iterations: usize,
}

impl Estimator {
    /// `side_len` is the number of side features the graphs will carry; a
    /// learned network must accept exactly the matching input count.
    pub fn new(
        algo: Algo,
        params: Option<MlpParams<f64>>,
        mu: f64,
        iterations: usize,
        side_len: usize,
    ) -> Result<Self, CliError> {
        if iterations == 0 {
            return Err(CliError::Config("iterations must be at least 1".into()));
        }
        if algo == Algo::SpaMu && !(0.0..1.0).contains(&mu) {
            return Err(CliError::Config(format!("momentum {mu} outside [0, 1)")));
        }
        match (algo.learned_rule(), &params) {
            (Some(_), None) => {
                return Err(CliError::Config(format!("{algo}: no model given (use --model {algo}=<path>)")))
            }
            (Some(rule), Some(p)) => {
                let want = rule.n_in(side_len).expect("learned rule");
                if p.n_in != want {
                    return Err(CliError::Config(format!(
                        "{algo}: model has {} inputs, this experiment needs {want}",
                        p.n_in
                    )));
                }
            }
            (None, _) => {}
        }
        Ok(Self {
            algo,
            params: if algo.is_learned() { params } else { None },
            mu,
            iterations,
        })
    }

    pub fn algo(&self) -> Algo {
        self.algo
    }

    pub fn params(&self) -> Option<&MlpParams<f64>> {
        self.params.as_ref()
    }

    pub fn run(&self, g: &PairwiseFactorGraph<f64>, side: &[f64]) -> Result<Estimate, CliError> {
        let mp = |rule: UpdateRule, momentum: f64| -> Result<Estimate, CliError> {
            let cfg = RunConfig {
                iterations: self.iterations,
                momentum,
                ..RunConfig::with_rule(rule)
            };
            let side = if rule == UpdateRule::Spa { &[][..] } else { side };
            let out = run_message_passing(g, &cfg, self.params.as_ref(), side)?;
            Ok(Estimate {
                beliefs: out.beliefs,
                llrs: out.llrs,
            })
        };
        match self.algo {
            Algo::Spa => mp(UpdateRule::Spa, 0.0),
            Algo::SpaMu => mp(UpdateRule::Spa, self.mu),
            Algo::CycbpE => mp(UpdateRule::NeuralExtrinsic, 0.0),
            Algo::Cycbp => mp(UpdateRule::Neural, 0.0),
            Algo::Cccp => {
                let beliefs = cccp_minimize(g, &CccpConfig::default())?.beliefs;
                let llrs = (0..g.num_vars()).map(|n| beliefs.single_llr(n)).collect();
                Ok(Estimate { beliefs, llrs })
            }
            Algo::Exact => Ok(Estimate {
                beliefs: exact_marginals(g)?,
                llrs: exact_llrs(g)?,
            }),
        }
    }
}

/// Parses a comma-separated algorithm list.
pub fn parse_algos(s: &str) -> Result<Vec<Algo>, CliError> {
    let algos: Vec<Algo> = s.split(',').map(|t| t.trim().parse()).collect::<Result<_, _>>()?;
    for (i, a) in algos.iter().enumerate() {
        if algos[..i].contains(a) {
            return Err(CliError::Config(format!("algorithm `{a}` listed twice")));
        }
    }
    Ok(algos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for a in Algo::ALL {
            assert_eq!(a.name().parse::<Algo>().unwrap(), a);
        }
        assert!("bp".parse::<Algo>().is_err());
        assert!(parse_algos("spa,spa").is_err());
        assert_eq!(parse_algos("cccp, exact").unwrap(), vec![Algo::Cccp, Algo::Exact]);
    }

    #[test]
    fn learned_entries_need_matching_models() {
        assert!(Estimator::new(Algo::Cycbp, None, 0.1, 10, 0).is_err());
        let p = MlpParams::zeros(5);
        assert!(Estimator::new(Algo::Cycbp, Some(p.clone()), 0.1, 10, 0).is_ok());
        assert!(Estimator::new(Algo::CycbpE, Some(p.clone()), 0.1, 10, 0).is_err());
        assert!(Estimator::new(Algo::Cycbp, Some(p), 0.1, 10, 4).is_err());
        assert!(Estimator::new(Algo::SpaMu, None, 1.0, 10, 0).is_err());
    }

    #[test]
    fn exact_entry_has_zero_kl() {
        let g = PairwiseFactorGraph::fully_connected(vec![0.3, -0.2, 0.1, 0.5], &[0.4, -0.7, 0.2, 0.9, -0.1, 0.3]).unwrap();
        let est = Estimator::new(Algo::Exact, None, 0.1, 10, 0).unwrap().run(&g, &[]).unwrap();
        let exact = exact_marginals(&g).unwrap();
        assert_eq!(cycbp::oracle::mean_kl(&est.beliefs.singles, &exact.singles), 0.0);
    }
}
