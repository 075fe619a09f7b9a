//! JSON-lines metrics log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use meter_core::config::Objective;
use meter_core::train::MetricsRecord;
use serde_json::{Map, Value};

/// Log key of an objective's loss; both image-modeling variants log as `loss_mim`.
pub fn loss_key(o: Objective) -> &'static str {
    match o {
        Objective::Mlm => "loss_mlm",
        Objective::Itm => "loss_itm",
        Objective::MimIbn | Objective::MimDc => "loss_mim",
        Objective::SpanLm => "loss_span_lm",
        Objective::Vqa => "loss_vqa",
    }
}

pub fn weight_key(o: Objective) -> String {
    format!("weight_{}", loss_key(o).trim_start_matches("loss_"))
}

pub fn record_json(rec: &MetricsRecord) -> Value {
    let mut m = Map::new();
    m.insert("step".into(), rec.step.into());
    m.insert("loss_total".into(), rec.loss_total.into());
    for (&o, &v) in &rec.losses {
        m.insert(loss_key(o).into(), v.into());
    }
    for (&o, &w) in &rec.weights {
        m.insert(weight_key(o), w.into());
    }
    m.insert("lr_bottom".into(), rec.lr_bottom.into());
    m.insert("lr_top".into(), rec.lr_top.into());
    m.insert("wall_ms".into(), rec.wall_ms.into());
    for (k, &v) in &rec.eval {
        m.insert(k.clone(), v.into());
    }
    Value::Object(m)
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    /// Appends one line and flushes, so a crashed run keeps its log.
    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, &record_json(rec))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// A log line without its wall-clock field, for run-to-run comparison.
pub fn without_wall_clock(mut rec: Map<String, Value>) -> Map<String, Value> {
    rec.remove("wall_ms");
    rec
}
