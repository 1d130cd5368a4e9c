//! The parent (A_p) and child (A_c) sides of the watch app.

use std::any::Any;

use comverse_core::app::{App, AppContext};
use comverse_core::fedcore::{AppEvent, Entries, RoundGuard, Value};
use comverse_core::identity::FedId;

use crate::data::{filter_frames, FrameFilter, SampleBatch};
use crate::model::{local_train, Model};
use crate::APP_ID;

fn round_entry(round: u64) -> Value {
    Value::Ints(vec![round as i64])
}

fn model_entries(m: &Model) -> Entries {
    Entries::from([
        ("value".into(), Value::Floats(m.weights.clone())),
        ("round".into(), round_entry(m.round)),
    ])
}

fn read_round(entries: &Entries) -> Option<u64> {
    entries.get("round")?.as_ints()?.first().map(|&r| r as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub attempt: u32,
    pub participants: Vec<FedId>,
    pub contributors: usize,
}

/// Owns the global model in O1 and folds each round's O5 into it.
pub struct ParentApp {
    model: Model,
    target_rounds: u64,
    eta: f64,
    history: Vec<Model>,
    records: Vec<RoundRecord>,
    errors: Vec<String>,
    attempt: (u32, Vec<FedId>),
}

impl ParentApp {
    pub fn new(dim: usize, target_rounds: u64, eta: f64) -> Self {
        let model = Model::zeros(dim);
        ParentApp {
            history: vec![model.clone()],
            model,
            target_rounds,
            eta,
            records: Vec::new(),
            errors: Vec::new(),
            attempt: (0, Vec::new()),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Model after every completed round, starting with the initial one.
    pub fn history(&self) -> &[Model] {
        &self.history
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn errors(&self) -> &[String] {
        &self.errors
    }

    fn fold(&mut self, ctx: &mut AppContext<'_>, contributors: usize) -> Result<(), String> {
        let out = ctx.read("O5").map_err(|e| e.to_string())?;
        let sum = out
            .entries
            .get("value")
            .and_then(Value::as_floats)
            .ok_or("O5 holds no float sum")?;
        let next = self.model.apply(sum, contributors, self.eta).map_err(|e| e.to_string())?;
        ctx.put("O1", model_entries(&next)).map_err(|e| e.to_string())?;
        self.records.push(RoundRecord {
            round: self.model.round,
            attempt: self.attempt.0,
            participants: self.attempt.1.clone(),
            contributors,
        });
        self.model = next;
        self.history.push(self.model.clone());
        Ok(())
    }
}

impl App for ParentApp {
    fn app_id(&self) -> &str {
        APP_ID
    }

    fn start(&mut self, ctx: &mut AppContext<'_>) {
        if let Err(e) = ctx.put("O1", model_entries(&self.model)) {
            self.errors.push(e.to_string());
        }
    }

    fn on_event(&mut self, event: &AppEvent, ctx: &mut AppContext<'_>) {
        let o4 = ctx.scoped("O4");
        match event {
            AppEvent::RoundOpened {
                aggregate,
                attempt,
                participants,
                ..
            } if *aggregate == o4 => self.attempt = (*attempt, participants.clone()),
            AppEvent::RoundCompleted {
                aggregate, contributors, ..
            } if *aggregate == o4 => {
                if let Err(e) = self.fold(ctx, *contributors) {
                    self.errors.push(e);
                }
            }
            _ => {}
        }
    }

    fn on_tick(&mut self, ctx: &mut AppContext<'_>) {
        if self.model.round >= self.target_rounds {
            return;
        }
        let open = ctx.round_status("O4").is_some_and(|s| s.attempt.is_some());
        if !open {
            let guard = RoundGuard {
                entry: "round".into(),
                value: round_entry(self.model.round),
            };
            // fails only while nobody is active yet; retried next tick
            let _ = ctx.open_round("O4", Some(guard));
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Trains on the local frames in O6 whenever a new model lands in O2.
pub struct ChildApp {
    filter: FrameFilter,
    trained: Vec<u64>,
    errors: Vec<String>,
}

impl ChildApp {
    pub fn new(filter: FrameFilter) -> Self {
        ChildApp {
            filter,
            trained: Vec::new(),
            errors: Vec::new(),
        }
    }

    /// Model rounds a gradient was computed for.
    pub fn trained(&self) -> &[u64] {
        &self.trained
    }

    pub fn errors(&self) -> &[String] {
        &self.errors
    }

    fn train(&mut self, ctx: &mut AppContext<'_>) -> Result<(), String> {
        let o2 = ctx.read("O2").map_err(|e| e.to_string())?;
        let weights = o2
            .entries
            .get("value")
            .and_then(Value::as_floats)
            .ok_or("O2 holds no weights")?
            .to_vec();
        let round = read_round(&o2.entries).ok_or("O2 has no round")?;
        let frames = ctx.read("O6").map_err(|e| e.to_string())?;
        let raw = SampleBatch::from_entries(&frames.entries).map_err(|e| e.to_string())?;
        let filter = self.filter;
        let batch = filter_frames(&raw, |s| filter.matches(s));
        let g = local_train(&Model { weights, round }, &batch).map_err(|e| e.to_string())?;
        ctx.put(
            "O3",
            Entries::from([("value".into(), Value::Floats(g.values)), ("round".into(), round_entry(g.round))]),
        )
        .map_err(|e| e.to_string())?;
        self.trained.push(round);
        Ok(())
    }
}

impl App for ChildApp {
    fn app_id(&self) -> &str {
        APP_ID
    }

    fn on_event(&mut self, event: &AppEvent, ctx: &mut AppContext<'_>) {
        if let AppEvent::ObjectChanged { object_id, .. } = event {
            if *object_id == ctx.scoped("O2") {
                if let Err(e) = self.train(ctx) {
                    self.errors.push(e);
                }
            }
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
