//! Diachronic sense analysis: keyword concordance over a period-tagged corpus,
//! gloss clustering by Jaro-Winkler similarity and per-period sense curves.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::jaro_winkler;

pub const DEFAULT_THETA: f64 = 0.85;

#[derive(Debug, thiserror::Error)]
pub enum SenseError {
    #[error("unknown period {0:?}")]
    UnknownPeriod(String),
    #[error("keyword is empty")]
    EmptyKeyword,
    #[error("theta must lie in (0, 1], got {0}")]
    InvalidTheta(f64),
    #[error("top_k must be positive")]
    InvalidTopK,
    #[error("nothing to chart")]
    EmptyTable,
    #[error("glosses line {line}: {reason}")]
    BadGloss { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SenseError + '_ {
    move |source| SenseError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Period {
    #[serde(rename = "Pre-Qin")]
    PreQin,
    Han,
    #[serde(rename = "Wei-Jin-NS")]
    WeiJinNs,
    Tang,
    Song,
    Yuan,
    Ming,
    Qing,
}

impl Period {
    pub const ALL: [Period; 8] = [
        Period::PreQin,
        Period::Han,
        Period::WeiJinNs,
        Period::Tang,
        Period::Song,
        Period::Yuan,
        Period::Ming,
        Period::Qing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Period::PreQin => "Pre-Qin",
            Period::Han => "Han",
            Period::WeiJinNs => "Wei-Jin-NS",
            Period::Tang => "Tang",
            Period::Song => "Song",
            Period::Yuan => "Yuan",
            Period::Ming => "Ming",
            Period::Qing => "Qing",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Period {
    type Err = SenseError;

    fn from_str(s: &str) -> Result<Self, SenseError> {
        Period::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SenseError::UnknownPeriod(s.to_string()))
    }
}

/// Documents grouped by period, indexed in canonical period order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PeriodCorpus {
    documents: [Vec<String>; 8],
}

impl PeriodCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, period: Period, text: impl Into<String>) {
        self.documents[period.index()].push(text.into());
    }

    pub fn documents(&self, period: Period) -> &[String] {
        &self.documents[period.index()]
    }

    /// Reads `dir/<period>/*.txt` in file-name order. Periods without a
    /// directory stay empty; any other subdirectory is an error.
    pub fn load(dir: &Path) -> Result<Self, SenseError> {
        let mut corpus = Self::new();
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .collect::<Result<_, _>>()
            .map_err(io_err(dir))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if !path.is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let period: Period = name.parse()?;
            let mut files: Vec<PathBuf> = fs::read_dir(&path)
                .map_err(io_err(&path))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()
                .map_err(io_err(&path))?;
            files.retain(|f| f.extension().is_some_and(|x| x == "txt"));
            files.sort();
            for f in files {
                corpus.add(period, fs::read_to_string(&f).map_err(io_err(&f))?);
            }
        }
        Ok(corpus)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hit {
    pub period: Period,
    pub snippet: String,
}

/// Every non-overlapping occurrence of `keyword`, scanning left to right,
/// with up to `window` characters of context on each side.
pub fn concordance(corpus: &PeriodCorpus, keyword: &str, window: usize) -> Result<Vec<Hit>, SenseError> {
    let key: Vec<char> = keyword.chars().collect();
    if key.is_empty() {
        return Err(SenseError::EmptyKeyword);
    }
    let docs: Vec<(Period, &String)> = Period::ALL
        .iter()
        .flat_map(|&p| corpus.documents(p).iter().map(move |d| (p, d)))
        .collect();
    let hits: Vec<Vec<Hit>> = docs
        .par_iter()
        .map(|&(period, doc)| {
            let cs: Vec<char> = doc.chars().collect();
            let mut out = Vec::new();
            let mut i = 0;
            while i + key.len() <= cs.len() {
                if cs[i..i + key.len()] == key[..] {
                    let lo = i.saturating_sub(window);
                    let hi = (i + key.len() + window).min(cs.len());
                    out.push(Hit {
                        period,
                        snippet: cs[lo..hi].iter().collect(),
                    });
                    i += key.len();
                } else {
                    i += 1;
                }
            }
            out
        })
        .collect();
    Ok(hits.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gloss {
    pub period: Period,
    pub snippet: String,
    pub gloss: String,
}

/// Reads `period,snippet,gloss` CSV with a header row.
pub fn read_glosses(src: &str) -> Result<Vec<Gloss>, SenseError> {
    let mut rdr = csv::Reader::from_reader(src.as_bytes());
    let mut out = Vec::new();
    for (n, row) in rdr.deserialize::<Gloss>().enumerate() {
        let g = row.map_err(|e| SenseError::BadGloss {
            line: n + 2,
            reason: e.to_string(),
        })?;
        if g.gloss.trim().is_empty() {
            return Err(SenseError::BadGloss {
                line: n + 2,
                reason: "empty gloss".into(),
            });
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SenseCluster {
    /// Gloss of the first member.
    pub representative: String,
    pub members: Vec<Gloss>,
    pub count_by_period: [usize; 8],
}

impl SenseCluster {
    pub fn count(&self) -> usize {
        self.members.len()
    }
}

/// Greedy first-fit clustering: each gloss joins the first cluster whose
/// representative scores at least `theta`, otherwise it starts a new one.
/// Clusters come back largest first, ties in order of creation.
pub fn cluster_glosses(glosses: &[Gloss], theta: f64) -> Result<Vec<SenseCluster>, SenseError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(SenseError::InvalidTheta(theta));
    }
    let mut clusters: Vec<SenseCluster> = Vec::new();
    for g in glosses {
        let home = clusters
            .iter()
            .position(|c| jaro_winkler(&c.representative, &g.gloss) >= theta);
        let c = match home {
            Some(i) => &mut clusters[i],
            None => {
                clusters.push(SenseCluster {
                    representative: g.gloss.clone(),
                    members: Vec::new(),
                    count_by_period: [0; 8],
                });
                clusters.last_mut().expect("just pushed")
            }
        };
        c.count_by_period[g.period.index()] += 1;
        c.members.push(g.clone());
    }
    clusters.sort_by_key(|c| std::cmp::Reverse(c.count()));
    Ok(clusters)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenseSeries {
    pub representative: String,
    /// Indexed by period.
    pub frequency: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenseTrajectory {
    /// Glossed occurrences per period across all clusters.
    pub occurrences: [usize; 8],
    pub series: Vec<SenseSeries>,
}

impl SenseTrajectory {
    /// False for periods without a single occurrence; their frequencies are 0.
    pub fn covered(&self, period: Period) -> bool {
        self.occurrences[period.index()] > 0
    }

    /// Adjacent covered periods (uncovered ones skipped) between which the
    /// leading series changes.
    pub fn crossings(&self, a: usize, b: usize) -> Vec<(Period, Period)> {
        let sign = |p: Period| {
            let d = self.series[a].frequency[p.index()] - self.series[b].frequency[p.index()];
            if d > 0.0 {
                1
            } else if d < 0.0 {
                -1
            } else {
                0
            }
        };
        let covered: Vec<Period> = Period::ALL
            .into_iter()
            .filter(|&p| self.covered(p) && sign(p) != 0)
            .collect();
        covered
            .windows(2)
            .filter(|w| sign(w[0]) != sign(w[1]))
            .map(|w| (w[0], w[1]))
            .collect()
    }
}

/// Relative frequency of the `top_k` largest clusters in each period, out of
/// all glossed occurrences in that period.
pub fn sense_trajectory(clusters: &[SenseCluster], top_k: usize) -> Result<SenseTrajectory, SenseError> {
    if top_k == 0 {
        return Err(SenseError::InvalidTopK);
    }
    let mut occurrences = [0usize; 8];
    for c in clusters {
        for (o, n) in occurrences.iter_mut().zip(c.count_by_period) {
            *o += n;
        }
    }
    let series = clusters
        .iter()
        .take(top_k)
        .map(|c| {
            let mut frequency = [0.0; 8];
            for (p, f) in frequency.iter_mut().enumerate() {
                if occurrences[p] > 0 {
                    *f = c.count_by_period[p] as f64 / occurrences[p] as f64;
                }
            }
            SenseSeries {
                representative: c.representative.clone(),
                frequency,
            }
        })
        .collect();
    Ok(SenseTrajectory { occurrences, series })
}

/// `period,cluster_representative,frequency` rows, periods outermost.
pub fn trajectory_csv(t: &SenseTrajectory) -> Result<String, SenseError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["period", "cluster_representative", "frequency"])?;
    for p in Period::ALL {
        for s in &t.series {
            w.write_record([p.name(), &s.representative, &s.frequency[p.index()].to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart with one polyline per series over the eight periods.
pub fn trajectory_svg(t: &SenseTrajectory, title: &str) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 360.0, 60.0, 160.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |i: usize| left + pw * i as f64 / 7.0;
    let y = |f: f64| top + ph * (1.0 - f);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    );
    s += &format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + ph,
        left + pw,
        top + ph
    );
    s += &format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + ph
    );
    for tick in 0..=4 {
        let f = tick as f64 / 4.0;
        s += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{f}</text>\n",
            left - 6.0,
            y(f) + 4.0
        );
    }
    for (i, p) in Period::ALL.iter().enumerate() {
        s += &format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            x(i),
            top + ph + 20.0,
            p.name()
        );
    }
    for (k, series) in t.series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = series
            .frequency
            .iter()
            .enumerate()
            .map(|(i, &f)| format!("{:.2},{:.2}", x(i), y(f)))
            .collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        );
        let ly = top + 16.0 * k as f64;
        s += &format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{colour}\" stroke-width=\"2\"/>\n",
            left + pw + 15.0,
            left + pw + 35.0
        );
        s += &format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            left + pw + 40.0,
            ly + 4.0,
            xml_escape(&series.representative)
        );
    }
    s += "</svg>\n";
    s
}

/// Writes `<prefix>.csv` and `<prefix>.svg`, returning both paths.
pub fn emit_chart(t: &SenseTrajectory, title: &str, prefix: &Path) -> Result<(PathBuf, PathBuf), SenseError> {
    if t.series.is_empty() {
        return Err(SenseError::EmptyTable);
    }
    let csv_path = prefix.with_extension("csv");
    let svg_path = prefix.with_extension("svg");
    fs::write(&csv_path, trajectory_csv(t)?).map_err(io_err(&csv_path))?;
    fs::write(&svg_path, trajectory_svg(t, title)).map_err(io_err(&svg_path))?;
    Ok((csv_path, svg_path))
}
