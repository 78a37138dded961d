use anyhow::Result;

use crate::args::CommonOpts;
use crate::report::{fmt, Report};

use super::load_training;

pub fn run(common: &CommonOpts) -> Result<bool> {
    let loaded = load_training(&common.data, &common.labels, common.delimiter_byte())?;
    let raw = &loaded.raw;
    let mut rep = Report::new("gpmc ingest-check");
    rep.kv("file", &common.data);
    rep.kv("rows", raw.x.nrows().to_string());
    rep.kv("features", raw.feature_names.join("\t"));
    rep.kv("classes", raw.num_classes().to_string());
    for (class, name) in raw.label_names.iter().enumerate() {
        let count = raw.y.iter().filter(|&&y| y == class).count();
        rep.kv("label", format!("{class}\t{name}\t{count}"));
    }
    for (j, name) in raw.feature_names.iter().enumerate() {
        rep.kv(
            "column",
            format!(
                "{name}\tmean\t{}\tsd\t{}",
                fmt(loaded.standardizer.mean[j]),
                fmt(loaded.standardizer.sd[j])
            ),
        );
    }
    let mut partial = false;
    for &j in &loaded.standardizer.constant_columns {
        rep.kv(
            "warning",
            format!(
                "column '{}' is constant and standardizes to zeros",
                raw.feature_names[j]
            ),
        );
        partial = true;
    }
    rep.kv("status", "ok");
    rep.write(None)?;
    Ok(partial)
}
