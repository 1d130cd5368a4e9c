//! One parent and N camera fedlets on the simulated network.

use std::collections::BTreeSet;

use comverse_core::appspec::{load_spec, AppSpec, Placement};
use comverse_core::fedctl::JoinPolicy;
use comverse_core::fedcore::TransformSpec;
use comverse_core::fedlet::{ApiRequest, Fedlet};
use comverse_core::identity::FedId;
use comverse_core::sim::{SimConfig, Simulation};

use crate::apps::{ChildApp, ParentApp};
use crate::data::{filter_frames, FrameFilter, GroundTruth, SampleBatch};
use crate::model::{loss, Model};
use crate::{CswError, APP_ID, CSW_SPEC};

pub const PARENT: &str = "watch";

/// Virtual time one round may take before the run counts as stalled.
const ROUND_BUDGET_MS: u64 = 120_000;

#[derive(Clone, Debug, PartialEq)]
pub struct DemoConfig {
    pub children: usize,
    pub rounds: u64,
    pub dim: usize,
    /// Coordinates kept per gradient; `None` sends it whole.
    pub topk: Option<usize>,
    pub seed: u64,
    pub eta: f64,
    pub samples_per_child: usize,
    pub noise: f64,
    pub filter: FrameFilter,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            children: 3,
            rounds: 50,
            dim: 8,
            topk: None,
            seed: 1,
            eta: 0.1,
            samples_per_child: 50,
            noise: 0.0,
            filter: FrameFilter::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: u64,
    pub loss: f64,
    pub contributors: usize,
}

/// The shipped spec with O3's transforms set for `topk`.
pub fn csw_spec(topk: Option<usize>) -> Result<AppSpec, CswError> {
    let mut spec = load_spec(CSW_SPEC).map_err(|e| CswError::Setup(e.to_string()))?;
    let mut chain = Vec::new();
    if let Some(k) = topk {
        chain.push(TransformSpec {
            name: "topk".into(),
            k: Some(k),
        });
    }
    chain.push(TransformSpec::named("mask"));
    spec.transforms.insert("O3".into(), chain);
    Ok(spec)
}

pub struct Demo {
    sim: Simulation,
    config: DemoConfig,
    children: Vec<String>,
    shards: Vec<SampleBatch>,
    truth: GroundTruth,
}

impl Demo {
    pub fn new(config: DemoConfig) -> Result<Demo, CswError> {
        if config.children == 0 || config.dim == 0 || config.samples_per_child == 0 {
            return Err(CswError::InvalidArgument("children, dim and samples must be positive".into()));
        }
        if config.topk == Some(0) {
            return Err(CswError::InvalidArgument("topk must keep at least one coordinate".into()));
        }
        if !(config.eta.is_finite() && config.eta > 0.0) {
            return Err(CswError::InvalidArgument(format!("eta {} must be positive", config.eta)));
        }
        let setup = |e: &dyn std::fmt::Display| CswError::Setup(e.to_string());
        let spec = csw_spec(config.topk)?;
        let children: Vec<String> = (1..=config.children).map(|i| format!("cam{i}")).collect();
        let parent = FedId::new(PARENT).map_err(|e| setup(&e))?;

        let mut sim = Simulation::new(SimConfig::new(config.seed));
        let allow: BTreeSet<FedId> = children
            .iter()
            .map(|c| FedId::new(c.as_str()).map(|id| id.member_of(&parent)))
            .collect::<Result<_, _>>()
            .map_err(|e| setup(&e))?;
        sim.add_community(PARENT, JoinPolicy { allow, deny: BTreeSet::new() })
            .map_err(|e| setup(&e))?;
        let app = ParentApp::new(config.dim, config.rounds, config.eta);
        sim.install(PARENT, &spec, &Placement::Parent, Some(Box::new(app)))
            .map_err(|e| setup(&e))?;

        let truth = GroundTruth::random(config.dim, config.seed);
        let mut shards = Vec::new();
        for (i, c) in children.iter().enumerate() {
            sim.add_node(c).map_err(|e| setup(&e))?;
            sim.api(c, ApiRequest::Join { community: parent.clone() }).map_err(|e| setup(&e))?;
            let shard_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
            shards.push(truth.sample(config.samples_per_child, config.noise, shard_seed));
        }
        sim.settle(30_000);
        for (c, shard) in children.iter().zip(&shards) {
            let placement = Placement::Child { community: parent.clone() };
            sim.install(c, &spec, &placement, Some(Box::new(ChildApp::new(config.filter))))
                .map_err(|e| setup(&e))?;
            let share = ApiRequest::Share {
                community: parent.clone(),
                data: vec![format!("{APP_ID}/O3")],
                revoke: false,
                aggregate_only: true,
            };
            sim.api(c, share).map_err(|e| setup(&e))?;
            let frames = format!("{APP_ID}/O6");
            sim.with_fedlet(c, |f, _| f.fedcore_mut().put_object(&frames, shard.to_entries()))
                .map_err(|e| setup(&e))?;
        }
        Ok(Demo {
            sim,
            config,
            children,
            shards,
            truth,
        })
    }

    pub fn config(&self) -> &DemoConfig {
        &self.config
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulation {
        &mut self.sim
    }

    pub fn children(&self) -> &[String] {
        &self.children
    }

    /// Each child's frames, unfiltered.
    pub fn shards(&self) -> &[SampleBatch] {
        &self.shards
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    /// What the children actually train on, pooled.
    pub fn pooled(&self) -> SampleBatch {
        let f = self.config.filter;
        let filtered: Vec<SampleBatch> = self.shards.iter().map(|s| filter_frames(s, |x| f.matches(x))).collect();
        SampleBatch::concat(&filtered)
    }

    pub fn parent_app(&self) -> &ParentApp {
        parent_app(self.sim.fedlet(PARENT))
    }

    pub fn child_app(&self, child: &str) -> &ChildApp {
        self.sim
            .fedlet(child)
            .app(APP_ID)
            .and_then(|a| a.as_any().downcast_ref::<ChildApp>())
            .expect("child app installed")
    }

    pub fn model(&self) -> &Model {
        self.parent_app().model()
    }

    /// Advance until the parent folds one more round into the model.
    pub fn run_round(&mut self) -> Result<RoundLog, CswError> {
        let target = self.model().round + 1;
        let done = self
            .sim
            .run_until_pred(ROUND_BUDGET_MS, |s| parent_app(s.fedlet(PARENT)).model().round >= target);
        if !done {
            return Err(CswError::Stalled {
                round: target - 1,
                at_ms: self.sim.now_ms(),
            });
        }
        let app = self.parent_app();
        let contributors = app.records().last().map_or(0, |r| r.contributors);
        Ok(RoundLog {
            round: target,
            loss: loss(&app.model().weights, &self.pooled())?,
            contributors,
        })
    }

    /// Train for the configured number of rounds.
    pub fn run(&mut self) -> Result<Vec<RoundLog>, CswError> {
        let mut logs = Vec::new();
        while self.model().round < self.config.rounds {
            logs.push(self.run_round()?);
        }
        Ok(logs)
    }
}

fn parent_app(f: &Fedlet) -> &ParentApp {
    f.app(APP_ID)
        .and_then(|a| a.as_any().downcast_ref::<ParentApp>())
        .expect("parent app installed")
}
