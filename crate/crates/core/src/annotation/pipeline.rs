use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    stage_evaluate, stage_refine, stage_translate, Flag, LlmBackend, LlmClient, MotionGroup, PromptSet, RetryPolicy,
    Stage, TranslationItem,
};
use crate::corpus::{entry_from_json_line, filter_by_length};
use crate::fsutil::write_atomic;
use crate::{Error, Result};

pub const ACCEPTED_FILE: &str = "accepted.jsonl";
pub const REVIEW_FILE: &str = "review_queue.jsonl";
pub const FAILED_FILE: &str = "failed.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub target_language: String,
    /// Length filter, applied only to inputs that carry a frame count.
    pub min_frames: Option<usize>,
    pub max_frames: Option<usize>,
    /// Groups processed concurrently.
    pub parallelism: usize,
    pub retry: RetryPolicy,
    pub min_request_interval_ms: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            target_language: "Chinese".into(),
            min_frames: None,
            max_frames: None,
            parallelism: 4,
            retry: RetryPolicy::default(),
            min_request_interval_ms: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::Parameter("parallelism must be >= 1".into()));
        }
        if let (Some(a), Some(b)) = (self.min_frames, self.max_frames) {
            if a > b {
                return Err(Error::Parameter("min_frames > max_frames".into()));
            }
        }
        self.retry.validate()?;
        PromptSet::new(&self.target_language).map(|_| ())
    }
}

/// A group that could not finish, with whatever it had gained so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailedGroup {
    pub motion_id: String,
    pub stage: Stage,
    pub error: String,
    pub items: Vec<TranslationItem>,
}

/// Item counts per output file after the run, plus what this run did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub accepted: usize,
    pub review: usize,
    pub failed: usize,
    pub groups_processed: usize,
    pub groups_skipped: usize,
    pub groups_filtered: usize,
    pub llm_requests: usize,
}

#[derive(Deserialize)]
struct RawGroup {
    motion_id: String,
    captions: Vec<String>,
    #[serde(default)]
    num_frames: Option<usize>,
}

/// Caption text for a token sequence from the synthetic corpus.
pub fn token_caption(tokens: &[usize]) -> String {
    tokens.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ")
}

fn in_range(n: usize, min: Option<usize>, max: Option<usize>) -> bool {
    (min.unwrap_or(0)..=max.unwrap_or(usize::MAX)).contains(&n)
}

/// Reads groups from either the synthetic corpus format (lang-a captions
/// become the originals) or the raw `{"motion_id", "captions": [..]}` form.
/// Returns the kept groups and how many were dropped by the length filter.
pub fn load_groups(path: &Path, min_frames: Option<usize>, max_frames: Option<usize>) -> Result<(Vec<MotionGroup>, usize)> {
    let text = fs::read_to_string(path)?;
    let mut groups = Vec::new();
    let mut filtered = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let group = if v.get("frames").is_some() {
            let entry = entry_from_json_line(line).map_err(err)?;
            let kept = filter_by_length(
                vec![entry],
                min_frames.unwrap_or(0),
                max_frames.unwrap_or(usize::MAX),
            );
            let Some(entry) = kept.into_iter().next() else {
                filtered += 1;
                continue;
            };
            let originals: Vec<String> = entry.captions.iter().map(|c| token_caption(&c.tokens_lang_a)).collect();
            MotionGroup {
                motion_id: entry.motion_id,
                items: originals.iter().map(|o| TranslationItem::new(o)).collect(),
            }
        } else {
            let raw: RawGroup = serde_json::from_value(v).map_err(|e| err(e.to_string()))?;
            if raw.num_frames.is_some_and(|n| !in_range(n, min_frames, max_frames)) {
                filtered += 1;
                continue;
            }
            MotionGroup {
                motion_id: raw.motion_id,
                items: raw.captions.iter().map(|o| TranslationItem::new(o)).collect(),
            }
        };
        group.validate().map_err(|e| err(e.to_string()))?;
        groups.push(group);
    }
    let mut seen = HashSet::new();
    if let Some(dup) = groups.iter().find(|g| !seen.insert(g.motion_id.as_str())) {
        return Err(Error::Schema(format!("motion id `{}` appears twice in {}", dup.motion_id, path.display())));
    }
    Ok((groups, filtered))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

fn process(group: &MotionGroup, client: &LlmClient, prompts: &PromptSet) -> std::result::Result<MotionGroup, FailedGroup> {
    let mut g = group.clone();
    for (stage, f) in [
        (Stage::Translate, stage_translate as fn(&MotionGroup, &LlmClient, &PromptSet) -> Result<MotionGroup>),
        (Stage::Refine, stage_refine),
        (Stage::Evaluate, stage_evaluate),
    ] {
        match f(&g, client, prompts) {
            Ok(next) => g = next,
            Err(e) => {
                return Err(FailedGroup {
                    motion_id: g.motion_id.clone(),
                    stage,
                    error: e.to_string(),
                    items: g.items,
                })
            }
        }
    }
    Ok(g)
}

/// Splits an evaluated group by routing rule: accepted items pass through,
/// anything flagged goes to review with the model's suggestions attached.
fn route(g: MotionGroup) -> (Option<MotionGroup>, Option<MotionGroup>) {
    let (acc, rev): (Vec<_>, Vec<_>) = g.items.into_iter().partition(|it| it.flag == Some(Flag::Accept));
    let wrap = |items: Vec<TranslationItem>| {
        (!items.is_empty()).then(|| MotionGroup {
            motion_id: g.motion_id.clone(),
            items,
        })
    };
    (wrap(acc), wrap(rev))
}

fn count_items(groups: &[MotionGroup]) -> usize {
    groups.iter().map(|g| g.items.len()).sum()
}

/// Runs all three stages over every group not already routed by an earlier
/// run in `out_dir`. Groups that fail are recorded and do not stop the run.
/// Failed groups from earlier runs are retried.
pub fn run_pipeline(input: &Path, backend: &dyn LlmBackend, out_dir: &Path, cfg: &PipelineConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    let prompts = PromptSet::new(&cfg.target_language)?;
    let (groups, filtered) = load_groups(input, cfg.min_frames, cfg.max_frames)?;
    fs::create_dir_all(out_dir)?;
    let mut accepted: Vec<MotionGroup> = read_jsonl(&out_dir.join(ACCEPTED_FILE))?;
    let mut review: Vec<MotionGroup> = read_jsonl(&out_dir.join(REVIEW_FILE))?;
    let done: HashSet<String> = accepted.iter().chain(&review).map(|g| g.motion_id.clone()).collect();
    let todo: Vec<&MotionGroup> = groups.iter().filter(|g| !done.contains(&g.motion_id)).collect();

    let client = LlmClient::new(backend, cfg.retry.clone(), Duration::from_millis(cfg.min_request_interval_ms));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let results: Vec<_> = pool.install(|| todo.par_iter().map(|g| process(g, &client, &prompts)).collect());

    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(g) => {
                let (a, r) = route(g);
                accepted.extend(a);
                review.extend(r);
            }
            Err(f) => failed.push(f),
        }
    }
    write_jsonl(&out_dir.join(ACCEPTED_FILE), &accepted)?;
    write_jsonl(&out_dir.join(REVIEW_FILE), &review)?;
    write_jsonl(&out_dir.join(FAILED_FILE), &failed)?;
    Ok(PipelineSummary {
        accepted: count_items(&accepted),
        review: count_items(&review),
        failed: failed.iter().map(|f| f.items.len()).sum(),
        groups_processed: todo.len(),
        groups_skipped: groups.len() - todo.len(),
        groups_filtered: filtered,
        llm_requests: client.requests_sent(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub moved_to_accepted: usize,
    pub still_in_review: usize,
}

/// Merges a human-edited copy of the review queue back. Reviewers set
/// `flag` to `accept` on items they have settled, editing the translation
/// fields as needed. Those items move to the accepted file. Originals must
/// match the queue exactly, so a review can never change source text.
pub fn apply_review(out_dir: &Path, edited: &Path) -> Result<ReviewSummary> {
    let accepted_path = out_dir.join(ACCEPTED_FILE);
    let review_path = out_dir.join(REVIEW_FILE);
    let mut accepted: Vec<MotionGroup> = read_jsonl(&accepted_path)?;
    let review: Vec<MotionGroup> = read_jsonl(&review_path)?;
    let edits: Vec<MotionGroup> = read_jsonl(edited)?;

    let mut by_id: HashMap<String, MotionGroup> = HashMap::new();
    for g in edits {
        let id = g.motion_id.clone();
        if by_id.insert(id.clone(), g).is_some() {
            return Err(Error::Schema(format!("motion id `{id}` appears twice in the edited review")));
        }
    }
    let mut remaining = Vec::new();
    let mut moved = 0;
    for queued in review {
        let Some(edit) = by_id.remove(&queued.motion_id) else {
            remaining.push(queued);
            continue;
        };
        let mut want: Vec<&str> = queued.items.iter().map(|i| i.original.as_str()).collect();
        let mut got: Vec<&str> = edit.items.iter().map(|i| i.original.as_str()).collect();
        want.sort_unstable();
        got.sort_unstable();
        if want != got {
            return Err(Error::Schema(format!(
                "edited group `{}` does not carry the queued originals unchanged",
                edit.motion_id
            )));
        }
        for it in &edit.items {
            it.check_flag_fields().map_err(Error::Schema)?;
        }
        let (acc, rev) = route(edit);
        if let Some(a) = acc {
            moved += a.items.len();
            match accepted.iter_mut().find(|g| g.motion_id == a.motion_id) {
                Some(g) => g.items.extend(a.items),
                None => accepted.push(a),
            }
        }
        remaining.extend(rev);
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Schema(format!("edited review names `{id}`, which is not in the queue")));
    }
    write_jsonl(&accepted_path, &accepted)?;
    write_jsonl(&review_path, &remaining)?;
    Ok(ReviewSummary {
        moved_to_accepted: moved,
        still_in_review: count_items(&remaining),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{MockBackend, MockRule};

    fn write_raw(dir: &Path, n: usize) -> std::path::PathBuf {
        let p = dir.join("in.jsonl");
        let mut s = String::new();
        for i in 0..n {
            s.push_str(
                &serde_json::json!({
                    "motion_id": format!("m{i:02}"),
                    "captions": [format!("a person waves hand {i}."), format!("someone greets with hand {i}.")],
                    "num_frames": 40 + i,
                })
                .to_string(),
            );
            s.push('\n');
        }
        fs::write(&p, s).unwrap();
        p
    }

    fn cfg() -> PipelineConfig {
        PipelineConfig {
            retry: RetryPolicy::immediate(),
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn all_accept_routes_everything_to_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_raw(dir.path(), 10);
        let out = dir.path().join("out");
        let s = run_pipeline(&input, &MockBackend::new(), &out, &cfg()).unwrap();
        assert_eq!((s.accepted, s.review, s.failed), (20, 0, 0));
        assert_eq!(s.groups_processed, 10);
        assert_eq!(s.llm_requests, 30);
        let acc: Vec<MotionGroup> = read_jsonl(&out.join(ACCEPTED_FILE)).unwrap();
        assert_eq!(acc.len(), 10);
        assert_eq!(acc[3].motion_id, "m03");
    }

    #[test]
    fn uncertain_items_land_in_review_with_reasons() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_raw(dir.path(), 10);
        let out = dir.path().join("out");
        let m = MockBackend::new()
            .with_rule("a person waves hand 2.", MockRule::uncertain("gesture is ambiguous"))
            .with_rule("someone greets with hand 7.", MockRule::uncertain("tone unclear"));
        let s = run_pipeline(&input, &m, &out, &cfg()).unwrap();
        assert_eq!((s.accepted, s.review, s.failed), (18, 2, 0));
        let rev: Vec<MotionGroup> = read_jsonl(&out.join(REVIEW_FILE)).unwrap();
        let items: Vec<&TranslationItem> = rev.iter().flat_map(|g| &g.items).collect();
        assert_eq!(items.len(), 2);
        assert!(items.iter().all(|i| i.flag == Some(Flag::Uncertain) && i.reason.is_some()));
    }

    #[test]
    fn rerun_skips_routed_groups_and_retries_failed_ones() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_raw(dir.path(), 10);
        let out = dir.path().join("out");
        let m = MockBackend::new().with_rule("a person waves hand 4.", MockRule::garbage(Stage::Refine));
        let s = run_pipeline(&input, &m, &out, &cfg()).unwrap();
        assert_eq!((s.accepted, s.review, s.failed), (18, 0, 2));
        let failed: Vec<FailedGroup> = read_jsonl(&out.join(FAILED_FILE)).unwrap();
        assert_eq!(failed[0].stage, Stage::Refine);
        assert!(failed[0].items.iter().all(|i| !i.translation.is_empty()));

        let m2 = MockBackend::new();
        let s2 = run_pipeline(&input, &m2, &out, &cfg()).unwrap();
        assert_eq!(s2.groups_skipped, 9);
        assert_eq!(m2.calls(), 3);
        assert_eq!((s2.accepted, s2.review, s2.failed), (20, 0, 0));

        let m3 = MockBackend::new();
        let s3 = run_pipeline(&input, &m3, &out, &cfg()).unwrap();
        assert_eq!(m3.calls(), 0);
        assert_eq!(s3.groups_skipped, 10);
    }

    #[test]
    fn length_filter_applies_to_inputs_with_frame_counts() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_raw(dir.path(), 10);
        let (g, filtered) = load_groups(&input, Some(42), Some(45)).unwrap();
        assert_eq!((g.len(), filtered), (4, 6));
    }

    #[test]
    fn synthetic_corpus_lines_are_ingested() {
        let dir = tempfile::tempdir().unwrap();
        let p = crate::corpus::CorpusParams {
            num_classes: 2,
            per_class: 2,
            ..Default::default()
        };
        let corpus = crate::corpus::generate_corpus(&p).unwrap();
        let path = dir.path().join("c.jsonl");
        crate::corpus::save_corpus(&corpus, &path).unwrap();
        let (g, _) = load_groups(&path, None, None).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g[0].items.len(), p.captions_per_motion);
        assert_eq!(g[0].items[0].original, token_caption(&corpus[0].captions[0].tokens_lang_a));
    }

    #[test]
    fn review_apply_moves_settled_items_and_guards_originals() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_raw(dir.path(), 3);
        let out = dir.path().join("out");
        let m = MockBackend::new()
            .with_rule("a person waves hand 1.", MockRule::incorrect("wrong verb", Some("某人挥手。")))
            .with_rule("someone greets with hand 1.", MockRule::uncertain("check"));
        run_pipeline(&input, &m, &out, &cfg()).unwrap();

        let mut rev: Vec<MotionGroup> = read_jsonl(&out.join(REVIEW_FILE)).unwrap();
        assert_eq!(rev.len(), 1);
        let tampered = {
            let mut t = rev.clone();
            t[0].items[0].original.push('!');
            t
        };
        let edited = dir.path().join("edited.jsonl");
        write_jsonl(&edited, &tampered).unwrap();
        assert!(matches!(apply_review(&out, &edited), Err(Error::Schema(_))));

        let i = rev[0].items.iter().position(|it| it.flag == Some(Flag::Incorrect)).unwrap();
        rev[0].items[i].flag = Some(Flag::Accept);
        write_jsonl(&edited, &rev).unwrap();
        let s = apply_review(&out, &edited).unwrap();
        assert_eq!((s.moved_to_accepted, s.still_in_review), (1, 1));
        let acc: Vec<MotionGroup> = read_jsonl(&out.join(ACCEPTED_FILE)).unwrap();
        let g1 = acc.iter().find(|g| g.motion_id == "m01").unwrap();
        assert_eq!(g1.items.len(), 1);
        assert_eq!(g1.items[0].final_translation(), "某人挥手。");
        assert_eq!(count_items(&acc), 5);
    }
}
