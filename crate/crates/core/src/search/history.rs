use serde::{Deserialize, Serialize};

/// One row per epoch and split. `split` is `warmup` for warm-up epochs,
/// `train` for the weight steps and `val` for the gate steps of a search
/// epoch. Epoch numbers run on across stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub task_loss: f64,
    pub cost_term: f64,
    pub expected_mflops: f64,
    pub temperature: f64,
    pub lr_weights: f64,
    pub lr_gates: f64,
    pub expected_c: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchHistory {
    pub layers: Vec<String>,
    pub rows: Vec<HistoryRow>,
    /// Temperature used by every gate step, in order.
    pub temperatures: Vec<f64>,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "epoch",
    "split",
    "task_loss",
    "cost_term",
    "expected_mflops",
    "temperature",
    "lr_weights",
    "lr_gates",
];

impl SearchHistory {
    pub fn new(layers: Vec<String>) -> Self {
        SearchHistory {
            layers,
            rows: Vec::new(),
            temperatures: Vec::new(),
        }
    }

    pub fn next_epoch(&self) -> usize {
        self.rows.last().map_or(0, |r| r.epoch + 1)
    }

    pub fn last(&self, split: &str) -> Option<&HistoryRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    pub fn extend(&mut self, other: SearchHistory) {
        self.rows.extend(other.rows);
        self.temperatures.extend(other.temperatures);
    }

    /// CSV with a leading `#` comment line carrying the config hash and seed.
    pub fn to_csv(&self, config_hash: &str, seed: u64) -> String {
        let mut out = format!("# config_hash={config_hash} seed={seed}\n");
        let mut header: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(self.layers.iter().map(|l| format!("expected_c.{l}")));
        out.push_str(&header.join(","));
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![
                r.epoch.to_string(),
                r.split.clone(),
                r.task_loss.to_string(),
                r.cost_term.to_string(),
                r.expected_mflops.to_string(),
                r.temperature.to_string(),
                r.lr_weights.to_string(),
                r.lr_gates.to_string(),
            ];
            cells.extend(r.expected_c.iter().map(f64::to_string));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}
