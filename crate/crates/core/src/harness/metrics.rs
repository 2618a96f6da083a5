use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "kind,step,episode,return,success,length,critic_loss,actor_loss,alpha,aux_loss,q_mean";

/// Running means of update scalars between two metric rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossAccumulator {
    pub count: u64,
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    pub aux: f64,
    pub q: f64,
}

impl LossAccumulator {
    pub fn add(&mut self, m: &crate::sac::UpdateMetrics) {
        if m.skipped {
            return;
        }
        self.count += 1;
        self.critic += m.critic_loss;
        self.actor += m.actor_loss;
        self.alpha += m.alpha;
        self.aux += m.aux_loss.unwrap_or(0.0);
        self.q += m.q_mean;
    }

    fn cells(&self, aux: bool) -> [String; 5] {
        if self.count == 0 {
            return Default::default();
        }
        let n = self.count as f64;
        [
            (self.critic / n).to_string(),
            (self.actor / n).to_string(),
            (self.alpha / n).to_string(),
            if aux { (self.aux / n).to_string() } else { String::new() },
            (self.q / n).to_string(),
        ]
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricsRow<'a> {
    Episode { step: u64, episode: u64, ret: f64, success: bool, length: usize, losses: &'a LossAccumulator, aux: bool },
    Eval { step: u64, episode: u64, ret: f64, success_rate: f64, length: f64 },
}

impl MetricsRow<'_> {
    pub fn to_csv(&self) -> String {
        match self {
            MetricsRow::Episode { step, episode, ret, success, length, losses, aux } => {
                let l = losses.cells(*aux);
                format!("episode,{step},{episode},{ret},{},{length},{}", u8::from(*success), l.join(","))
            }
            MetricsRow::Eval { step, episode, ret, success_rate, length } => {
                format!("eval,{step},{episode},{ret},{success_rate},{length},,,,,")
            }
        }
    }
}

/// Append-only metrics file, flushed per row.
#[derive(Debug)]
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Starts a fresh file with just the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Keeps rows up to `step` and appends from there.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::InvalidState(format!("{} has an unexpected header", path.display())));
        }
        let mut kept = format!("{METRICS_HEADER}\n");
        for line in lines {
            let row_step: u64 = line
                .split(',')
                .nth(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidState(format!("malformed metrics row '{line}'")))?;
            if row_step <= step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(path, kept)?;
        let out = BufWriter::new(fs::OpenOptions::new().append(true).open(path)?);
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }
}
