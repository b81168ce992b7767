use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

/// Column order of the metrics CSV. Episode rows leave the loss columns empty and
/// update rows leave the episode columns empty.
pub const COLUMNS: [&str; 20] = [
    "kind",
    "global_step",
    "episode",
    "episode_return",
    "success",
    "lesson",
    "r_touch",
    "r_collision",
    "r_pos",
    "r_rot",
    "r_fmt",
    "r_fft",
    "policy_loss",
    "value_loss",
    "entropy",
    "kl",
    "clip_fraction",
    "lr",
    "beta",
    "wall_clock",
];

pub fn header() -> String {
    COLUMNS.join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Episode,
    Update,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeFields {
    pub episode: u64,
    pub episode_return: f64,
    pub success: bool,
    pub lesson: usize,
    /// Per-step means of the six reward terms.
    pub components: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateFields {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: Option<f64>,
    pub lr: f64,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub global_step: u64,
    pub episode: Option<EpisodeFields>,
    pub update: Option<UpdateFields>,
    pub wall_clock: Option<f64>,
}

impl MetricsRow {
    pub fn kind(&self) -> RowKind {
        if self.update.is_some() {
            RowKind::Update
        } else {
            RowKind::Episode
        }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: f64| format!("{v}");
        let mut cells: Vec<String> = Vec::with_capacity(COLUMNS.len());
        cells.push(match self.kind() {
            RowKind::Episode => "episode".into(),
            RowKind::Update => "update".into(),
        });
        cells.push(self.global_step.to_string());
        match &self.episode {
            Some(e) => {
                cells.push(e.episode.to_string());
                cells.push(f(e.episode_return));
                cells.push(u8::from(e.success).to_string());
                cells.push(e.lesson.to_string());
                cells.extend(e.components.iter().map(|&c| f(c)));
            }
            None => cells.extend(std::iter::repeat_n(String::new(), 10)),
        }
        match &self.update {
            Some(u) => {
                cells.push(f(u.policy_loss));
                cells.push(f(u.value_loss));
                cells.push(f(u.entropy));
                cells.push(f(u.kl));
                cells.push(u.clip_fraction.map(f).unwrap_or_default());
                cells.push(f(u.lr));
                cells.push(u.beta.map(f).unwrap_or_default());
            }
            None => cells.extend(std::iter::repeat_n(String::new(), 7)),
        }
        cells.push(self.wall_clock.map(|w| format!("{w:.3}")).unwrap_or_default());
        debug_assert_eq!(cells.len(), COLUMNS.len());
        cells.join(",")
    }
}

/// Single writer for the metrics file; rows are flushed as they are written.
pub struct MetricsWriter {
    out: BufWriter<File>,
    last_step: u64,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let file = File::create(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let mut w = Self { out: BufWriter::new(file), last_step: 0 };
        w.line(&header())?;
        Ok(w)
    }

    /// Opens an existing file for appending, keeping rows up to `global_step` and
    /// dropping anything a crashed run wrote after its last checkpoint.
    pub fn resume(path: &Path, global_step: u64) -> Result<Self, HarnessError> {
        let io = |e: std::io::Error| HarnessError::Io(format!("{}: {e}", path.display()));
        let text = std::fs::read_to_string(path).map_err(io)?;
        let mut lines = text.lines();
        if lines.next() != Some(header().as_str()) {
            return Err(HarnessError::Io(format!("{}: metrics header does not match schema {SCHEMA_VERSION}", path.display())));
        }
        let mut kept = vec![header()];
        for l in lines {
            let step: u64 = l.split(',').nth(1).and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if step > global_step {
                break;
            }
            kept.push(l.to_string());
        }
        let mut body = kept.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(io)?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok(Self { out: BufWriter::new(file), last_step: global_step })
    }

    fn line(&mut self, s: &str) -> Result<(), HarnessError> {
        writeln!(self.out, "{s}").and_then(|_| self.out.flush()).map_err(|e| HarnessError::Io(e.to_string()))
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<(), HarnessError> {
        debug_assert!(row.global_step >= self.last_step, "global step went backwards");
        self.last_step = row.global_step;
        self.line(&row.to_csv())
    }
}
