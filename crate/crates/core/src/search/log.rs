//! Per-generation history rows and their CSV form.

use super::{Branch, Candidate, SearchError};

pub const CSV_HEADER: &str = "gen,slot,branch,genotype,params,macs,fps,latency_ms,gpu_miou,device_miou,fitness,parent_a,parent_b,operator,seed";

/// One evaluated candidate as logged. Measurement columns are `None` for a
/// candidate whose training diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub gen: usize,
    pub slot: usize,
    pub branch: Branch,
    pub genotype: String,
    pub params: usize,
    pub macs: Option<u64>,
    pub fps: Option<f64>,
    pub latency_ms: Option<f64>,
    pub gpu_miou: Option<f64>,
    pub device_miou: Option<f64>,
    pub fitness: f64,
    pub parent_a: Option<usize>,
    pub parent_b: Option<usize>,
    pub operator: String,
    pub seed: u64,
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, T::to_string)
}

impl LogRow {
    pub fn from_candidate(gen: usize, branch: Branch, c: &Candidate) -> Self {
        let m = c.measurement.as_ref();
        Self {
            gen,
            slot: c.slot,
            branch,
            genotype: c.genotype.to_string(),
            params: c.params,
            macs: m.map(|m| m.macs),
            fps: m.map(|m| m.fps),
            latency_ms: m.map(|m| m.latency_ms),
            gpu_miou: c.gpu_miou,
            device_miou: m.map(|m| m.miou_device),
            fitness: c.fitness,
            parent_a: c.lineage.parent_a,
            parent_b: c.lineage.parent_b,
            operator: c.lineage.operator.as_str().to_string(),
            seed: c.seed,
        }
    }

    fn fields(&self) -> [String; 15] {
        [
            self.gen.to_string(),
            self.slot.to_string(),
            self.branch.as_str().to_string(),
            self.genotype.clone(),
            self.params.to_string(),
            opt(&self.macs),
            opt(&self.fps),
            opt(&self.latency_ms),
            opt(&self.gpu_miou),
            opt(&self.device_miou),
            self.fitness.to_string(),
            opt(&self.parent_a),
            opt(&self.parent_b),
            self.operator.clone(),
            self.seed.to_string(),
        ]
    }

    fn from_record(f: &csv::StringRecord) -> Result<Self, SearchError> {
        let bad = |detail: String| SearchError::BadHistory(format!("{detail} in row {:?}", f.iter().collect::<Vec<_>>()));
        if f.len() != 15 {
            return Err(bad(format!("{} fields, expected 15", f.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, name: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("bad {name} {s:?}"))
        }
        fn maybe<T: std::str::FromStr>(s: &str, name: &str) -> Result<Option<T>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s, name).map(Some)
            }
        }
        let row = (|| -> Result<Self, String> {
            Ok(Self {
                gen: num(&f[0], "gen")?,
                slot: num(&f[1], "slot")?,
                branch: Branch::parse(&f[2]).ok_or_else(|| format!("bad branch {:?}", &f[2]))?,
                genotype: f[3].to_string(),
                params: num(&f[4], "params")?,
                macs: maybe(&f[5], "macs")?,
                fps: maybe(&f[6], "fps")?,
                latency_ms: maybe(&f[7], "latency_ms")?,
                gpu_miou: maybe(&f[8], "gpu_miou")?,
                device_miou: maybe(&f[9], "device_miou")?,
                fitness: num(&f[10], "fitness")?,
                parent_a: maybe(&f[11], "parent_a")?,
                parent_b: maybe(&f[12], "parent_b")?,
                operator: f[13].to_string(),
                seed: num(&f[14], "seed")?,
            })
        })();
        row.map_err(bad)
    }
}

/// All rows of one generation plus summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationLog {
    pub generation: usize,
    pub rows: Vec<LogRow>,
    pub max_fitness: f64,
    pub median_fitness: f64,
    /// Highest device mIoU.
    pub max_iou: f64,
    pub max_gpu_iou: f64,
    pub max_fps: f64,
}

fn max_of(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(f64::NEG_INFINITY, f64::max)
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl GenerationLog {
    pub fn from_rows(generation: usize, rows: Vec<LogRow>) -> Self {
        let fit: Vec<f64> = rows.iter().map(|r| r.fitness).collect();
        Self {
            generation,
            max_fitness: max_of(fit.iter().copied()),
            median_fitness: median(&fit),
            max_iou: max_of(rows.iter().filter_map(|r| r.device_miou)),
            max_gpu_iou: max_of(rows.iter().filter_map(|r| r.gpu_miou)),
            max_fps: max_of(rows.iter().filter_map(|r| r.fps)),
            rows,
        }
    }
}

/// Header plus every row of every generation. Floats use the shortest
/// text that parses back to the same value.
pub fn history_csv(history: &[GenerationLog]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
    for r in history.iter().flat_map(|g| &g.rows) {
        w.write_record(r.fields()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
}

/// Parses a history file back into generations (rows grouped by `gen`).
pub fn parse_history(text: &str) -> Result<Vec<GenerationLog>, SearchError> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = r.records();
    let header = records
        .next()
        .transpose()
        .map_err(|e| SearchError::BadHistory(e.to_string()))?;
    if header.as_ref().map(|h| h.iter().collect::<Vec<_>>().join(",")) != Some(CSV_HEADER.to_string()) {
        return Err(SearchError::BadHistory("missing or unexpected header".into()));
    }
    let mut gens: Vec<Vec<LogRow>> = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| SearchError::BadHistory(e.to_string()))?;
        let row = LogRow::from_record(&rec)?;
        if row.gen == gens.len() {
            gens.push(Vec::new());
        } else if row.gen + 1 != gens.len() {
            return Err(SearchError::BadHistory(format!("generation {} out of order", row.gen)));
        }
        gens.last_mut().expect("pushed above").push(row);
    }
    Ok(gens
        .into_iter()
        .enumerate()
        .map(|(g, rows)| GenerationLog::from_rows(g, rows))
        .collect())
}
