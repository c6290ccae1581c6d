use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{train_model, TrainConfig, TrainMode};
use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::eval::{evaluable_users, mean_ndcg};
use crate::network::ModelKind;

/// Axes of a hyperparameter lattice. Empty axes keep the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpace {
    pub latent_dim: Vec<usize>,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub negatives: Vec<usize>,
    pub mode: Vec<TrainMode>,
}

impl GridSpace {
    /// Cartesian product in the order r, λ, β, N, mode (last varies fastest).
    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        fn axis<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
            if values.is_empty() {
                vec![fallback]
            } else {
                values.to_vec()
            }
        }
        let negatives: Vec<Option<usize>> = if self.negatives.is_empty() {
            vec![base.negatives]
        } else {
            self.negatives.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for r in axis(&self.latent_dim, base.latent_dim) {
            for lambda in axis(&self.lambda, base.lambda) {
                for beta in axis(&self.beta, base.beta) {
                    for &n in &negatives {
                        for mode in axis(&self.mode, base.mode) {
                            out.push(TrainConfig {
                                latent_dim: r,
                                lambda,
                                beta,
                                negatives: n,
                                mode,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub config: TrainConfig,
    pub val_ndcg: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub results: Vec<GridResult>,
    pub best: usize,
}

impl GridOutcome {
    pub fn best(&self) -> &GridResult {
        &self.results[self.best]
    }

    /// One row per configuration, in enumeration order.
    pub fn write_table(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "index,latent_dim,lambda,beta,negatives,mode,val_ndcg,seconds,best")?;
        for (i, r) in self.results.iter().enumerate() {
            let c = &r.config;
            writeln!(
                out,
                "{i},{},{},{},{},{},{},{},{}",
                c.latent_dim,
                c.lambda,
                c.beta,
                c.negatives.map(|n| n.to_string()).unwrap_or_default(),
                c.mode.name(),
                r.val_ndcg,
                r.seconds,
                i == self.best
            )?;
        }
        Ok(())
    }
}

/// Index of the winner: highest score, then smaller r, then smaller λ, then
/// earlier position.
pub fn pick_best(results: &[GridResult]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &results[b];
                if r.val_ndcg != cur.val_ndcg {
                    r.val_ndcg > cur.val_ndcg
                } else if r.config.latent_dim != cur.config.latent_dim {
                    r.config.latent_dim < cur.config.latent_dim
                } else {
                    r.config.lambda < cur.config.lambda
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Scores every configuration with `score` and picks the winner.
pub fn grid_search(configs: &[TrainConfig], mut score: impl FnMut(&TrainConfig) -> Result<f64>) -> Result<GridOutcome> {
    if configs.is_empty() {
        return Err(Error::invalid("grid lattice is empty"));
    }
    let results = configs
        .iter()
        .map(|c| {
            let started = Instant::now();
            let val_ndcg = score(c)?;
            if val_ndcg.is_nan() {
                return Err(Error::invalid("grid metric returned NaN"));
            }
            Ok(GridResult {
                config: c.clone(),
                val_ndcg,
                seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = pick_best(&results).expect("nonempty results");
    Ok(GridOutcome { results, best })
}

/// Trains `kind` under `config` and returns full validation NDCG of the
/// serving head.
pub fn train_and_validate(
    kind: ModelKind,
    train: &InteractionMatrix,
    validation: &InteractionMatrix,
    config: &TrainConfig,
) -> Result<f64> {
    let (model, _) = train_model(kind, train, validation, config)?;
    let users = evaluable_users(train, validation);
    mean_ndcg(&model, model.serving_heads(), train, validation, &users)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_cardinality_and_order() {
        let space = GridSpace {
            latent_dim: vec![50, 100],
            lambda: vec![1e-5],
            ..GridSpace::default()
        };
        let configs = space.expand(&TrainConfig::default());
        assert_eq!(configs.len(), 2);
        assert_eq!(configs[0].latent_dim, 50);
        assert_eq!(configs[1].latent_dim, 100);

        let space = GridSpace {
            latent_dim: vec![50, 100],
            lambda: vec![1e-3, 1e-1, 1.0],
            negatives: vec![5, 50],
            mode: TrainMode::ALL.to_vec(),
            ..GridSpace::default()
        };
        assert_eq!(space.expand(&TrainConfig::default()).len(), 2 * 3 * 2 * 4);
    }

    #[test]
    fn single_config_lattice() {
        let configs = GridSpace::default().expand(&TrainConfig::default());
        assert_eq!(configs.len(), 1);
        let out = grid_search(&configs, |_| Ok(0.1)).unwrap();
        assert_eq!(out.best().config, TrainConfig::default());
        assert!(grid_search(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn injected_metric_selects_its_favourite() {
        let space = GridSpace {
            latent_dim: vec![200, 50, 100],
            ..GridSpace::default()
        };
        let configs = space.expand(&TrainConfig::default());
        let out = grid_search(&configs, |c| Ok(if c.latent_dim == 50 { 0.9 } else { 0.1 })).unwrap();
        assert_eq!(out.best().config.latent_dim, 50);
    }

    #[test]
    fn ties_go_to_smaller_r_then_smaller_lambda() {
        let space = GridSpace {
            latent_dim: vec![100, 50],
            lambda: vec![1.0, 0.01],
            ..GridSpace::default()
        };
        let configs = space.expand(&TrainConfig::default());
        let out = grid_search(&configs, |_| Ok(0.5)).unwrap();
        assert_eq!(out.best().config.latent_dim, 50);
        assert_eq!(out.best().config.lambda, 0.01);

        let space = GridSpace {
            mode: vec![TrainMode::Alternating, TrainMode::Joint],
            ..GridSpace::default()
        };
        let out = grid_search(&space.expand(&TrainConfig::default()), |_| Ok(0.5)).unwrap();
        assert_eq!(out.best().config.mode, TrainMode::Alternating);
    }

    #[test]
    fn table_has_one_row_per_config() {
        let configs = GridSpace {
            latent_dim: vec![4, 8],
            ..GridSpace::default()
        }
        .expand(&TrainConfig::default());
        let out = grid_search(&configs, |c| Ok(c.latent_dim as f64)).unwrap();
        let mut buf = Vec::new();
        out.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().ends_with("true"));
    }
}
