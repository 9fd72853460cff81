use std::path::PathBuf;

use airwayseg::volio::{synthesize_phantom, write_labels, write_probabilities, PhantomSpec};

use super::ensure_dir;
use crate::cases::{GT_SUFFIX, PRED_SUFFIX, PROB_SUFFIX};
use crate::{CliError, CliResult, PhantomArgs, EXIT_OK};

/// Suffix of the expected-metrics card written beside each phantom.
pub const CARD_SUFFIX: &str = "_card.json";

/// Files written for one phantom case.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhantomFiles {
    pub case_id: String,
    pub gt: PathBuf,
    pub pred: PathBuf,
    pub prob: PathBuf,
    pub card: PathBuf,
}

pub fn write_phantoms(args: &PhantomArgs) -> CliResult<Vec<PhantomFiles>> {
    if args.count == 0 {
        return Err(CliError("--count must be at least 1".into()));
    }
    let spec = PhantomSpec::read(&args.spec)?;
    let prefix = match &args.case_id {
        Some(id) => id.clone(),
        None => args
            .spec
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("phantom")
            .to_string(),
    };
    ensure_dir(&args.out)?;
    let mut written = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let mut s = spec.clone();
        s.seed = spec.seed.wrapping_add(i as u64);
        let case_id = if args.count == 1 { prefix.clone() } else { format!("{prefix}_{i:03}") };
        let ph = synthesize_phantom(&s)?;
        let files = PhantomFiles {
            gt: args.out.join(format!("{case_id}{GT_SUFFIX}")),
            pred: args.out.join(format!("{case_id}{PRED_SUFFIX}")),
            prob: args.out.join(format!("{case_id}{PROB_SUFFIX}")),
            card: args.out.join(format!("{case_id}{CARD_SUFFIX}")),
            case_id,
        };
        write_labels(&ph.gt, &files.gt)?;
        write_labels(&ph.pred, &files.pred)?;
        write_probabilities(&ph.prob, &files.prob)?;
        ph.expected.write(&files.card)?;
        written.push(files);
    }
    Ok(written)
}

pub fn run(args: &PhantomArgs) -> CliResult<i32> {
    let files = write_phantoms(args)?;
    for f in &files {
        println!("{}: {}", f.case_id, f.card.display());
    }
    Ok(EXIT_OK)
}
