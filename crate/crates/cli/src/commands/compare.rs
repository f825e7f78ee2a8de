use std::path::Path;

use vidsal::metrics::{compare_per_video, per_video_from_records, Comparison, CSV_HEADER};

use crate::args::CompareArgs;
use crate::commands::field;
use crate::failure::Failure;

pub fn read_records(path: &Path) -> Result<Vec<[String; 4]>, Failure> {
    let err = |m: String| Failure::data(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = r.headers().map_err(|e| err(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(err(format!("expected header {}", CSV_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let cols: Vec<String> = rec.iter().map(str::to_string).collect();
        let row: [String; 4] = cols
            .try_into()
            .map_err(|c: Vec<String>| err(format!("{} columns, expected 4", c.len())))?;
        out.push(row);
    }
    Ok(out)
}

pub fn render(c: &Comparison) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:+.4}"));
    let width = c
        .rows
        .iter()
        .map(|(id, _)| id.len())
        .max()
        .unwrap_or(0)
        .max("variance".len());
    let mut out = format!("{:<width$} {:>10}\n", "video", format!("{} A-B", c.metric));
    for (id, d) in &c.rows {
        out.push_str(&format!("{id:<width$} {:>10}\n", fmt(*d)));
    }
    out.push_str(&format!("{:<width$} {:>10}\n", "mean", fmt(c.mean)));
    let var = c.variance.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4e}"));
    out.push_str(&format!("{:<width$} {var:>10}\n", "variance"));
    out
}

pub fn run(a: CompareArgs) -> Result<(), Failure> {
    let ra = per_video_from_records(&read_records(&a.a)?, a.metric)?;
    let rb = per_video_from_records(&read_records(&a.b)?, a.metric)?;
    if ra.is_empty() {
        return Err(Failure::data(format!("{} has no {} rows", a.a.display(), a.metric)));
    }
    let c = compare_per_video(&ra, &rb, a.metric)?;
    print!("{}", render(&c));
    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["video_id", "metric", "difference"])?;
        for (id, d) in &c.rows {
            w.write_record([id.as_str(), c.metric.name(), &field(*d)])?;
        }
        w.write_record(["mean", c.metric.name(), &field(c.mean)])?;
        w.write_record(["variance", c.metric.name(), &field(c.variance)])?;
        w.flush().map_err(|e| Failure::io(path, e))?;
    }
    Ok(())
}
