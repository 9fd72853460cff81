//! Matching ground truth, prediction, probability and region files by case id.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::{CaseInputArgs, CliError, CliResult};

pub const GT_SUFFIX: &str = "_gt.mhd";
pub const PRED_SUFFIX: &str = "_pred.mhd";
pub const PROB_SUFFIX: &str = "_prob.mhd";
pub const REGION_SUFFIX: &str = "_region.mhd";

#[derive(Clone, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFiles {
    pub case_id: String,
    #[serde(default)]
    pub gt: Option<PathBuf>,
    #[serde(default)]
    pub pred: Option<PathBuf>,
    #[serde(default)]
    pub prob: Option<PathBuf>,
    #[serde(default)]
    pub region: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    cases: Vec<CaseFiles>,
}

/// Every case id seen in `dir`, sorted, with whichever files exist.
pub fn discover(dir: &Path) -> CliResult<Vec<CaseFiles>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError(format!("{}: {e}", dir.display())))?;
    let mut by_id: BTreeMap<String, CaseFiles> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError(format!("{}: {e}", dir.display())))?;
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        for suffix in [GT_SUFFIX, PRED_SUFFIX, PROB_SUFFIX, REGION_SUFFIX] {
            if let Some(id) = name.strip_suffix(suffix).filter(|id| !id.is_empty()) {
                let case = by_id.entry(id.to_string()).or_insert_with(|| CaseFiles {
                    case_id: id.to_string(),
                    ..Default::default()
                });
                let slot = match suffix {
                    GT_SUFFIX => &mut case.gt,
                    PRED_SUFFIX => &mut case.pred,
                    PROB_SUFFIX => &mut case.prob,
                    _ => &mut case.region,
                };
                *slot = Some(path.clone());
                break;
            }
        }
    }
    Ok(by_id.into_values().collect())
}

/// Reads a manifest: `{"cases": [{"case_id", "gt", "pred", "prob", "region"}]}`.
/// Relative paths are taken from the manifest's directory.
pub fn read_manifest(path: &Path) -> CliResult<Vec<CaseFiles>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = std::collections::BTreeSet::new();
    let mut cases = Vec::with_capacity(m.cases.len());
    for mut c in m.cases {
        if !seen.insert(c.case_id.clone()) {
            return Err(CliError(format!("{}: duplicate case id {}", path.display(), c.case_id)));
        }
        for p in [&mut c.gt, &mut c.pred, &mut c.prob, &mut c.region].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cases.push(c);
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(cases)
}

pub fn collect(args: &CaseInputArgs) -> CliResult<Vec<CaseFiles>> {
    match (&args.manifest, &args.input_dir) {
        (Some(m), _) => read_manifest(m),
        (None, Some(d)) => discover(d),
        (None, None) => Err(CliError("either --input-dir or --manifest is required".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_convention() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a_gt.mhd", "a_pred.mhd", "a_prob.mhd", "b_gt.mhd", "b_gt.raw", "notes.txt", "c_pred.mhd"] {
            std::fs::write(dir.path().join(name), "").unwrap();
        }
        let cases = discover(dir.path()).unwrap();
        let ids: Vec<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(cases[0].prob.is_some() && cases[0].region.is_none());
        assert!(cases[1].pred.is_none());
        assert!(cases[2].gt.is_none());
    }

    #[test]
    fn manifest_paths_are_relative_to_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.json");
        std::fs::write(&m, r#"{"cases": [{"case_id": "z", "gt": "x/z.mhd", "pred": "/abs/p.mhd"}, {"case_id": "a"}]}"#).unwrap();
        let cases = read_manifest(&m).unwrap();
        assert_eq!(cases[0].case_id, "a");
        assert_eq!(cases[1].gt.as_deref(), Some(dir.path().join("x/z.mhd").as_path()));
        assert_eq!(cases[1].pred.as_deref(), Some(Path::new("/abs/p.mhd")));
        std::fs::write(&m, r#"{"cases": [{"case_id": "a"}, {"case_id": "a"}]}"#).unwrap();
        assert!(read_manifest(&m).is_err());
    }
}
