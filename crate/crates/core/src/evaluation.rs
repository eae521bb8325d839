//! Human evaluation: the realism study (sampling, blinded serving,
//! confusion matrices) and the condition-matching audit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Timelike, Utc};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{FrameCache, TupleRef, CADENCE_MINUTES, MAX_LEAD_MINUTES};
use crate::error::{Error, Result};
use crate::models::{Generator, LatentSpec};
use crate::synthesis::restore_aspect;

/// The only text shown next to each image.
pub const QUESTION: &str = "What is your first impression of this image?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Real,
    Generated,
}

impl Truth {
    fn index(self) -> usize {
        match self {
            Truth::Real => 0,
            Truth::Generated => 1,
        }
    }
}

/// Public manifest entry: what examiners may learn about an item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub item_id: String,
    /// Image path, relative to the manifest's directory.
    pub image: PathBuf,
}

/// Sealed per-item ground truth and hidden metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub item_id: String,
    pub pair_id: String,
    pub truth: Truth,
    pub site_id: String,
    pub timestamp: DateTime<Utc>,
    pub lead_minutes: u32,
}

/// An item as held by the study organizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealismItem {
    pub item: ManifestItem,
    pub truth: TruthRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub item_id: String,
    pub examiner_id: String,
    pub judged: Truth,
    pub decided_at: DateTime<Utc>,
}

/// Rows: actual real / generated. Columns: judged real / generated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn from_counts(rr: u64, rg: u64, gr: u64, gg: u64) -> Self {
        Self {
            counts: [[rr, rg], [gr, gg]],
        }
    }

    pub fn add(&mut self, truth: Truth, judged: Truth) {
        self.counts[truth.index()][judged.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    /// Fraction of correct judgments; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }
}

/// Parameters of the realism-study sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealismConfig {
    pub n_pairs: usize,
    /// Inclusive start hour (UTC).
    pub hour_start: u32,
    /// Exclusive end hour (UTC).
    pub hour_end: u32,
    pub max_lead_minutes: u32,
    pub lead_step_minutes: u32,
    pub seed: u64,
    pub sigma: f64,
    pub aspect_ratio: f64,
}

impl Default for RealismConfig {
    fn default() -> Self {
        Self {
            n_pairs: 75,
            hour_start: 6,
            hour_end: 14,
            max_lead_minutes: MAX_LEAD_MINUTES,
            lead_step_minutes: CADENCE_MINUTES as u32,
            seed: 0,
            sigma: crate::synthesis::DEFAULT_SIGMA,
            aspect_ratio: 2.0,
        }
    }
}

/// One sampled `(I₀, w₀)` pair with its drawn lead.
#[derive(Debug, Clone, PartialEq)]
pub struct RealismPair {
    pub pair_id: String,
    pub tuple: TupleRef,
}

fn in_window(t: DateTime<Utc>, cfg: &RealismConfig) -> bool {
    (cfg.hour_start..cfg.hour_end).contains(&t.hour())
}

/// Draws `n_pairs` distinct start frames (both `t₀` and `t` inside the hour
/// window) and one uniformly random admissible lead for each.
pub fn select_realism_pairs(tuples: &[TupleRef], cfg: &RealismConfig) -> Result<Vec<RealismPair>> {
    let mut by_start: BTreeMap<DateTime<Utc>, Vec<&TupleRef>> = BTreeMap::new();
    for t in tuples {
        let lead_ok = t.lead_minutes <= cfg.max_lead_minutes
            && (cfg.lead_step_minutes == 0 || t.lead_minutes % cfg.lead_step_minutes == 0);
        if lead_ok && in_window(t.t0, cfg) && in_window(t.t, cfg) {
            by_start.entry(t.t0).or_default().push(t);
        }
    }
    let starts: Vec<_> = by_start.into_values().collect();
    if starts.len() < cfg.n_pairs {
        return Err(Error::InsufficientPairs {
            available: starts.len(),
            requested: cfg.n_pairs,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen = sample(&mut rng, starts.len(), cfg.n_pairs).into_vec();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            let options = &starts[i];
            let pick = options[rng.random_range(0..options.len())];
            RealismPair {
                pair_id: format!("pair-{k:03}"),
                tuple: pick.clone(),
            }
        })
        .collect())
}

/// The condition audit uses the first `n` sampled pairs.
pub fn audit_pairs(pairs: &[RealismPair], n: usize) -> &[RealismPair] {
    &pairs[..n.min(pairs.len())]
}

/// Renders the real and generated image for every pair into `out_dir` and
/// returns the `2 · n_pairs` items in a seeded shuffled order with opaque ids.
pub fn sample_realism_set(
    pairs: &[RealismPair],
    cache: &mut FrameCache,
    g: &Generator,
    site_id: &str,
    cfg: &RealismConfig,
    out_dir: &Path,
) -> Result<Vec<RealismItem>> {
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let latent = LatentSpec::new(g.config.latent_dim, cfg.sigma)?;
    let mut drafts = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let tuple = cache.materialize(&p.tuple)?;
        let z = latent.sample(1, &mut rng).row(0).to_owned();
        let fake = g.generate(&tuple.i0, &tuple.w0, &tuple.wt, &z)?;
        drafts.push((p, Truth::Real, (*tuple.it).clone()));
        drafts.push((p, Truth::Generated, fake));
    }
    let order = sample(&mut rng, drafts.len(), drafts.len()).into_vec();
    let mut items = Vec::with_capacity(drafts.len());
    for (k, &i) in order.iter().enumerate() {
        let (p, truth, img) = &drafts[i];
        let item_id = format!("item-{k:04}");
        let file = PathBuf::from(format!("{item_id}.png"));
        let path = out_dir.join(&file);
        restore_aspect(img, cfg.aspect_ratio)?
            .save(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        items.push(RealismItem {
            item: ManifestItem {
                item_id: item_id.clone(),
                image: file,
            },
            truth: TruthRecord {
                item_id,
                pair_id: p.pair_id.clone(),
                truth: *truth,
                site_id: site_id.to_string(),
                timestamp: p.tuple.t,
                lead_minutes: p.tuple.lead_minutes,
            },
        });
    }
    Ok(items)
}

/// Writes `items.json` (public) and `truth.json` (sealed) into `dir`.
pub fn write_study(items: &[RealismItem], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest: Vec<&ManifestItem> = items.iter().map(|i| &i.item).collect();
    let truth: Vec<&TruthRecord> = items.iter().map(|i| &i.truth).collect();
    std::fs::write(dir.join("items.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&truth)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestItem>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Per-examiner random subsets (without replacement) of the item ids.
pub fn assign_items(
    item_ids: &[String],
    examiners: &[String],
    per_examiner: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<String>>> {
    if per_examiner > item_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot assign {per_examiner} of {} items",
            item_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for e in examiners {
        let picks = sample(&mut rng, item_ids.len(), per_examiner)
            .into_iter()
            .map(|i| item_ids[i].clone())
            .collect();
        out.insert(e.clone(), picks);
    }
    Ok(out)
}

/// Appends one judgment as a JSON line.
pub fn append_judgment<W: Write>(mut w: W, j: &JudgmentRecord) -> Result<()> {
    let mut line = serde_json::to_vec(j)?;
    line.push(b'\n');
    w.write_all(&line)?;
    Ok(())
}

pub fn read_judgments<R: BufRead>(reader: R) -> Result<Vec<JudgmentRecord>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Aggregated judgments plus any data-quality warnings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub matrix: ConfusionMatrix,
    pub accuracy: f64,
    pub warnings: Vec<String>,
}

/// Keeps the latest judgment per `(item, examiner)`; later lines win ties.
fn deduplicate(judgments: &[JudgmentRecord]) -> (Vec<&JudgmentRecord>, Vec<String>) {
    let mut latest: HashMap<(&str, &str), usize> = HashMap::new();
    let mut warnings = Vec::new();
    for (i, j) in judgments.iter().enumerate() {
        let key = (j.item_id.as_str(), j.examiner_id.as_str());
        if let Some(prev) = latest.get(&key).copied() {
            warnings.push(format!(
                "duplicate judgment of `{}` by `{}`; keeping the latest",
                j.item_id, j.examiner_id
            ));
            if j.decided_at >= judgments[prev].decided_at {
                latest.insert(key, i);
            }
        } else {
            latest.insert(key, i);
        }
    }
    let mut keep: Vec<usize> = latest.into_values().collect();
    keep.sort_unstable();
    (keep.into_iter().map(|i| &judgments[i]).collect(), warnings)
}

pub fn aggregate_confusion(judgments: &[JudgmentRecord], truth: &[TruthRecord]) -> Result<ConfusionReport> {
    let by_id: HashMap<&str, &TruthRecord> = truth.iter().map(|t| (t.item_id.as_str(), t)).collect();
    let (kept, warnings) = deduplicate(judgments);
    let mut matrix = ConfusionMatrix::default();
    for j in kept {
        let t = by_id
            .get(j.item_id.as_str())
            .ok_or_else(|| Error::UnknownItem(j.item_id.clone()))?;
        matrix.add(t.truth, j.judged);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ConfusionReport {
        accuracy: matrix.accuracy(),
        matrix,
        warnings,
    })
}

/// Confusion matrices split by camera site.
pub fn aggregate_by_site(judgments: &[JudgmentRecord], truth: &[TruthRecord]) -> Result<BTreeMap<String, ConfusionReport>> {
    let site_of: HashMap<&str, &str> = truth.iter().map(|t| (t.item_id.as_str(), t.site_id.as_str())).collect();
    let mut grouped: BTreeMap<&str, Vec<JudgmentRecord>> = BTreeMap::new();
    for j in judgments {
        let site = site_of
            .get(j.item_id.as_str())
            .ok_or_else(|| Error::UnknownItem(j.item_id.clone()))?;
        grouped.entry(site).or_default().push(j.clone());
    }
    grouped
        .into_iter()
        .map(|(site, js)| Ok((site.to_string(), aggregate_confusion(&js, truth)?)))
        .collect()
}

/// Text rendering in the layout of the realism table.
pub fn render_confusion(site: &str, r: &ConfusionReport) -> String {
    let c = &r.matrix.counts;
    let mut s = String::new();
    let _ = writeln!(s, "{site}");
    let _ = writeln!(s, "{:<18}{:>14}{:>18}", "", "judged real", "judged generated");
    let _ = writeln!(s, "{:<18}{:>14}{:>18}", "actual real", c[0][0], c[0][1]);
    let _ = writeln!(s, "{:<18}{:>14}{:>18}", "actual generated", c[1][0], c[1][1]);
    let _ = writeln!(
        s,
        "accuracy {:.1}% ({}/{})",
        100.0 * r.accuracy,
        r.matrix.correct(),
        r.matrix.total()
    );
    s
}

// ---------------------------------------------------------------------------
// Condition audit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    CloudCover,
    CloudType,
    Visibility,
    Ground,
    TimeOfDay,
    Sunlight,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::CloudCover,
        Criterion::CloudType,
        Criterion::Visibility,
        Criterion::Ground,
        Criterion::TimeOfDay,
        Criterion::Sunlight,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Criterion::CloudCover => "cloud_cover",
            Criterion::CloudType => "cloud_type",
            Criterion::Visibility => "visibility",
            Criterion::Ground => "ground",
            Criterion::TimeOfDay => "time_of_day",
            Criterion::Sunlight => "sunlight",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Criterion::CloudCover => "Cloud cover",
            Criterion::CloudType => "Cloud type",
            Criterion::Visibility => "Visibility",
            Criterion::Ground => "Ground",
            Criterion::TimeOfDay => "Time of day",
            Criterion::Sunlight => "Diffuse/direct",
        }
    }

    pub fn values(self) -> &'static [&'static str] {
        match self {
            Criterion::CloudCover => &["clear sky", "few", "cloudy", "overcast"],
            Criterion::CloudType => &["cumuliform", "stratiform", "stratocumuliform", "cirriform"],
            Criterion::Visibility => &["good", "poor"],
            Criterion::Ground => &["dry", "wet", "frost", "snow"],
            Criterion::TimeOfDay => &["dawn", "daylight", "dusk", "night"],
            Criterion::Sunlight => &["diffuse", "direct"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    InaccurateForecast,
    InconsistentVisualization,
}

impl Attribution {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "inaccurate_forecast" => Some(Self::InaccurateForecast),
            "inconsistent_visualization" => Some(Self::InconsistentVisualization),
            _ => None,
        }
    }

    fn key(self) -> &'static str {
        match self {
            Self::InaccurateForecast => "inaccurate_forecast",
            Self::InconsistentVisualization => "inconsistent_visualization",
        }
    }
}

/// One criterion of a checklist: the condition seen in the real image, the
/// condition seen in the visualization, and for mismatches the blamed cause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionEntry {
    pub observed: String,
    pub visualized: String,
    pub attribution: Option<Attribution>,
}

impl CriterionEntry {
    pub fn matches(&self) -> bool {
        self.observed == self.visualized
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionChecklist {
    pub pair_id: String,
    pub entries: BTreeMap<Criterion, CriterionEntry>,
}

impl ConditionChecklist {
    /// Every criterion present with admissible values; attribution present
    /// exactly for mismatches.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::IncompleteChecklist(self.pair_id.clone(), m));
        for c in Criterion::ALL {
            let Some(e) = self.entries.get(&c) else {
                return fail(format!("missing `{}`", c.key()));
            };
            for v in [&e.observed, &e.visualized] {
                if !c.values().contains(&v.as_str()) {
                    return fail(format!("`{}` value `{v}` not in {:?}", c.key(), c.values()));
                }
            }
            if e.matches() == e.attribution.is_some() {
                return fail(format!("`{}` attribution must be given exactly for mismatches", c.key()));
            }
        }
        Ok(())
    }

    pub fn has_visualization_failure(&self) -> bool {
        self.entries
            .values()
            .any(|e| e.attribution == Some(Attribution::InconsistentVisualization))
    }
}

/// Checklist CSV header: `pair_id` then per criterion `<c>`,
/// `<c>_visualized`, `<c>_attribution`.
pub fn checklist_header() -> Vec<String> {
    let mut h = vec!["pair_id".to_string()];
    for c in Criterion::ALL {
        h.push(c.key().to_string());
        h.push(format!("{}_visualized", c.key()));
        h.push(format!("{}_attribution", c.key()));
    }
    h
}

pub fn read_checklists<R: Read>(reader: R) -> Result<Vec<ConditionChecklist>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let pair_col = col("pair_id").ok_or_else(|| Error::InvalidArgument("checklist CSV lacks `pair_id`".into()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let pair_id = rec.get(pair_col).unwrap_or("").to_string();
        let mut entries = BTreeMap::new();
        for c in Criterion::ALL {
            let get = |name: String| col(&name).and_then(|i| rec.get(i)).map(str::trim).unwrap_or("");
            let observed = get(c.key().to_string());
            let visualized = get(format!("{}_visualized", c.key()));
            let attr = get(format!("{}_attribution", c.key()));
            if observed.is_empty() || visualized.is_empty() {
                return Err(Error::IncompleteChecklist(pair_id, format!("missing `{}`", c.key())));
            }
            let attribution = if attr.is_empty() {
                None
            } else {
                Some(Attribution::parse(attr).ok_or_else(|| {
                    Error::IncompleteChecklist(pair_id.clone(), format!("unknown attribution `{attr}`"))
                })?)
            };
            entries.insert(
                c,
                CriterionEntry {
                    observed: observed.to_string(),
                    visualized: visualized.to_string(),
                    attribution,
                },
            );
        }
        let cl = ConditionChecklist { pair_id, entries };
        cl.validate()?;
        out.push(cl);
    }
    Ok(out)
}

pub fn write_checklists<W: Write>(writer: W, checklists: &[ConditionChecklist]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(checklist_header())?;
    for cl in checklists {
        let mut row = vec![cl.pair_id.clone()];
        for c in Criterion::ALL {
            let e = cl
                .entries
                .get(&c)
                .ok_or_else(|| Error::IncompleteChecklist(cl.pair_id.clone(), format!("missing `{}`", c.key())))?;
            row.push(e.observed.clone());
            row.push(e.visualized.clone());
            row.push(e.attribution.map(|a| a.key().to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditScore {
    pub checklists: usize,
    pub matches: BTreeMap<Criterion, usize>,
    pub visualization_failures: usize,
}

pub fn score_condition_audit(checklists: &[ConditionChecklist]) -> Result<AuditScore> {
    let mut matches: BTreeMap<Criterion, usize> = Criterion::ALL.iter().map(|c| (*c, 0)).collect();
    let mut failures = 0;
    for cl in checklists {
        cl.validate()?;
        for (c, e) in &cl.entries {
            if e.matches() {
                *matches.get_mut(c).expect("all criteria") += 1;
            }
        }
        if cl.has_visualization_failure() {
            failures += 1;
        }
    }
    Ok(AuditScore {
        checklists: checklists.len(),
        matches,
        visualization_failures: failures,
    })
}

/// Text rendering in the layout of the condition-audit table.
pub fn render_audit(rows: &[(String, AuditScore)]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<12}", "Site");
    for c in Criterion::ALL {
        let _ = write!(s, "{:>16}", c.label());
    }
    let _ = writeln!(s, "{:>10}", "Failures");
    for (site, score) in rows {
        let _ = write!(s, "{site:<12}");
        for c in Criterion::ALL {
            let _ = write!(s, "{:>16}", format!("{}/{}", score.matches[&c], score.checklists));
        }
        let _ = writeln!(s, "{:>10}", score.visualization_failures);
    }
    s
}

// ---------------------------------------------------------------------------
// Blinded serving

/// Judged/assigned counts for one examiner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub judged: usize,
    pub assigned: usize,
}

/// What an examiner receives for the next item. Carries no truth, time or
/// lead information by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextItem {
    pub item_id: String,
    pub image_url: String,
    pub question: String,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JudgmentRejection {
    UnknownItem,
    Unassigned,
}

/// In-memory state of a running realism study.
#[derive(Debug, Clone)]
pub struct Study {
    items: Vec<ManifestItem>,
    truth: Vec<TruthRecord>,
    assignments: Option<BTreeMap<String, Vec<String>>>,
    judgments: Vec<JudgmentRecord>,
}

impl Study {
    pub fn new(
        items: Vec<ManifestItem>,
        truth: Vec<TruthRecord>,
        assignments: Option<BTreeMap<String, Vec<String>>>,
        judgments: Vec<JudgmentRecord>,
    ) -> Result<Self> {
        let ids: BTreeSet<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
        for t in &truth {
            if !ids.contains(t.item_id.as_str()) {
                return Err(Error::UnknownItem(t.item_id.clone()));
            }
        }
        if let Some(a) = &assignments {
            for id in a.values().flatten() {
                if !ids.contains(id.as_str()) {
                    return Err(Error::UnknownItem(id.clone()));
                }
            }
        }
        Ok(Self {
            items,
            truth,
            assignments,
            judgments,
        })
    }

    pub fn items(&self) -> &[ManifestItem] {
        &self.items
    }

    pub fn item(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|i| i.item_id == id)
    }

    pub fn judgments(&self) -> &[JudgmentRecord] {
        &self.judgments
    }

    fn assigned(&self, examiner: &str) -> Vec<&str> {
        match &self.assignments {
            Some(a) => a
                .get(examiner)
                .map(|v| v.iter().map(String::as_str).collect())
                .unwrap_or_default(),
            None => self.items.iter().map(|i| i.item_id.as_str()).collect(),
        }
    }

    pub fn progress(&self, examiner: &str) -> Progress {
        let assigned = self.assigned(examiner);
        let done: BTreeSet<&str> = self
            .judgments
            .iter()
            .filter(|j| j.examiner_id == examiner)
            .map(|j| j.item_id.as_str())
            .collect();
        Progress {
            judged: assigned.iter().filter(|id| done.contains(*id)).count(),
            assigned: assigned.len(),
        }
    }

    /// First assigned item the examiner has not judged yet.
    pub fn next_item(&self, examiner: &str) -> Option<NextItem> {
        let done: BTreeSet<&str> = self
            .judgments
            .iter()
            .filter(|j| j.examiner_id == examiner)
            .map(|j| j.item_id.as_str())
            .collect();
        let id = self.assigned(examiner).into_iter().find(|id| !done.contains(id))?;
        Some(NextItem {
            item_id: id.to_string(),
            image_url: format!("/img/{id}"),
            question: QUESTION.to_string(),
            progress: self.progress(examiner),
        })
    }

    /// Validates a judgment against the item list and assignments.
    pub fn check(&self, j: &JudgmentRecord) -> std::result::Result<(), JudgmentRejection> {
        if self.item(&j.item_id).is_none() {
            return Err(JudgmentRejection::UnknownItem);
        }
        if !self.assigned(&j.examiner_id).contains(&j.item_id.as_str()) {
            return Err(JudgmentRejection::Unassigned);
        }
        Ok(())
    }

    pub fn record(&mut self, j: JudgmentRecord) -> std::result::Result<(), JudgmentRejection> {
        self.check(&j)?;
        self.judgments.push(j);
        Ok(())
    }

    pub fn report(&self) -> Result<ConfusionReport> {
        aggregate_confusion(&self.judgments, &self.truth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn truth(id: &str, t: Truth) -> TruthRecord {
        TruthRecord {
            item_id: id.into(),
            pair_id: "p".into(),
            truth: t,
            site_id: "s".into(),
            timestamp: Utc.with_ymd_and_hms(2020, 1, 1, 8, 0, 0).unwrap(),
            lead_minutes: 0,
        }
    }

    fn judgment(id: &str, who: &str, judged: Truth, minute: u32) -> JudgmentRecord {
        JudgmentRecord {
            item_id: id.into(),
            examiner_id: who.into(),
            judged,
            decided_at: Utc.with_ymd_and_hms(2020, 1, 1, 9, minute, 0).unwrap(),
        }
    }

    #[test]
    fn paper_accuracies() {
        let m = ConfusionMatrix::from_counts(57, 18, 43, 32);
        assert_eq!((m.correct(), m.total()), (89, 150));
        assert_eq!(format!("{:.1}", 100.0 * m.accuracy()), "59.3");
        let m = ConfusionMatrix::from_counts(52, 23, 32, 43);
        assert_eq!(format!("{:.1}", 100.0 * m.accuracy()), "63.3");
    }

    #[test]
    fn duplicates_keep_latest_and_unknown_fails() {
        let t = vec![truth("a", Truth::Real)];
        let js = vec![judgment("a", "e", Truth::Generated, 1), judgment("a", "e", Truth::Real, 2)];
        let r = aggregate_confusion(&js, &t).unwrap();
        assert_eq!(r.matrix, ConfusionMatrix::from_counts(1, 0, 0, 0));
        assert_eq!(r.warnings.len(), 1);
        let bad = vec![judgment("zz", "e", Truth::Real, 1)];
        assert!(matches!(aggregate_confusion(&bad, &t), Err(Error::UnknownItem(_))));
    }

    #[test]
    fn assignment_is_seeded_and_without_replacement() {
        let ids: Vec<String> = (0..150).map(|i| format!("i{i}")).collect();
        let ex: Vec<String> = (0..5).map(|i| format!("e{i}")).collect();
        let a = assign_items(&ids, &ex, 30, 1).unwrap();
        assert_eq!(a, assign_items(&ids, &ex, 30, 1).unwrap());
        assert_eq!(a.values().map(Vec::len).sum::<usize>(), 150);
        for v in a.values() {
            assert_eq!(v.iter().collect::<BTreeSet<_>>().len(), 30);
        }
        assert!(assign_items(&ids, &ex, 0, 1).unwrap().values().all(Vec::is_empty));
    }

    fn checklist(mismatch: Option<Attribution>) -> ConditionChecklist {
        let entries = Criterion::ALL
            .iter()
            .map(|c| {
                let v = c.values()[0].to_string();
                let (vis, attr) = match (c, mismatch) {
                    (Criterion::Ground, Some(a)) => (c.values()[1].to_string(), Some(a)),
                    _ => (v.clone(), None),
                };
                (
                    *c,
                    CriterionEntry {
                        observed: v,
                        visualized: vis,
                        attribution: attr,
                    },
                )
            })
            .collect();
        ConditionChecklist {
            pair_id: "p".into(),
            entries,
        }
    }

    #[test]
    fn attribution_rule() {
        assert_eq!(score_condition_audit(&[checklist(None)]).unwrap().visualization_failures, 0);
        let forecast = checklist(Some(Attribution::InaccurateForecast));
        let s = score_condition_audit(&[forecast]).unwrap();
        assert_eq!((s.visualization_failures, s.matches[&Criterion::Ground]), (0, 0));
        let viz = checklist(Some(Attribution::InconsistentVisualization));
        assert_eq!(score_condition_audit(&[viz]).unwrap().visualization_failures, 1);
    }

    #[test]
    fn incomplete_checklists_are_rejected() {
        let mut c = checklist(None);
        c.entries.remove(&Criterion::Sunlight);
        assert!(matches!(score_condition_audit(&[c]), Err(Error::IncompleteChecklist(..))));
        let mut c = checklist(None);
        c.entries.get_mut(&Criterion::Ground).unwrap().visualized = "wet".into();
        assert!(score_condition_audit(&[c]).is_err());
    }

    #[test]
    fn checklist_csv_round_trip() {
        let cls = vec![checklist(None), checklist(Some(Attribution::InconsistentVisualization))];
        let mut buf = Vec::new();
        write_checklists(&mut buf, &cls).unwrap();
        assert_eq!(read_checklists(buf.as_slice()).unwrap(), cls);
    }

    #[test]
    fn study_serves_until_exhausted() {
        let items: Vec<ManifestItem> = ["a", "b"]
            .iter()
            .map(|id| ManifestItem {
                item_id: id.to_string(),
                image: PathBuf::from(format!("{id}.png")),
            })
            .collect();
        let t = vec![truth("a", Truth::Real), truth("b", Truth::Generated)];
        let mut assign = BTreeMap::new();
        assign.insert("e".to_string(), vec!["b".to_string()]);
        let mut s = Study::new(items, t, Some(assign), vec![]).unwrap();
        let n = s.next_item("e").unwrap();
        assert_eq!((n.item_id.as_str(), n.progress), ("b", Progress { judged: 0, assigned: 1 }));
        assert_eq!(s.record(judgment("a", "e", Truth::Real, 0)), Err(JudgmentRejection::Unassigned));
        s.record(judgment("b", "e", Truth::Real, 0)).unwrap();
        assert!(s.next_item("e").is_none());
        assert_eq!(s.report().unwrap().matrix, ConfusionMatrix::from_counts(0, 0, 1, 0));
        let json = serde_json::to_value(&n).unwrap();
        for key in ["truth", "timestamp", "lead", "lead_minutes"] {
            assert!(json.get(key).is_none());
        }
    }
}
