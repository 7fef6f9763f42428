//! Triplet datasets of (original image, Canny edge map, text prompt).
//!
//! Manifest file: UTF-8 text, first line `resolution\t<n>`, then one record
//! per line with four tab-separated fields
//! `image_path  edge_path  prompt  domain_tag`. Paths are relative to the
//! manifest's directory; `domain_tag` is `jiehua` or `other`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::canny::{canny, CannyParams, EdgeMap};
use super::image::{load_image, resize, save_image, Image};
use super::synth::{synth_image, Style};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Jiehua,
    Other,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Jiehua => "jiehua",
            Domain::Other => "other",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jiehua" => Ok(Domain::Jiehua),
            "other" => Ok(Domain::Other),
            _ => Err(Error::Config(format!("unknown domain tag `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub image: Image,
    pub edge: EdgeMap,
    pub prompt: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub edge_path: PathBuf,
    pub prompt: String,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub records: Vec<ManifestRecord>,
    /// Directory that relative record paths are resolved against.
    pub root: PathBuf,
}

fn check_field(s: &str, what: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!(
            "{what} `{s}` contains a tab or newline"
        )));
    }
    Ok(())
}

impl DatasetManifest {
    pub fn to_text(&self) -> Result<String> {
        let mut out = format!("resolution\t{}\n", self.resolution);
        for r in &self.records {
            let img = r.image_path.to_string_lossy();
            let edge = r.edge_path.to_string_lossy();
            check_field(&img, "image path")?;
            check_field(&edge, "edge path")?;
            check_field(&r.prompt, "prompt")?;
            out.push_str(&format!("{img}\t{edge}\t{}\t{}\n", r.prompt, r.domain));
        }
        Ok(out)
    }

    pub fn parse(text: &str, root: &Path) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty manifest")?;
        let resolution = header
            .strip_prefix("resolution\t")
            .ok_or_else(|| format!("bad header `{header}`"))?
            .parse::<usize>()
            .map_err(|e| format!("bad resolution: {e}"))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(format!(
                    "line {}: expected 4 fields, got {}",
                    i + 2,
                    f.len()
                ));
            }
            records.push(ManifestRecord {
                image_path: f[0].into(),
                edge_path: f[1].into(),
                prompt: f[2].to_string(),
                domain: f[3]
                    .parse()
                    .map_err(|e: Error| format!("line {}: {e}", i + 2))?,
            });
        }
        Ok(Self {
            resolution,
            records,
            root: root.to_path_buf(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest file and checks every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, root).map_err(|msg| Error::format(path, msg))?;
        for r in &m.records {
            for p in [&r.image_path, &r.edge_path] {
                let full = m.root.join(p);
                if !full.exists() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn load_sample(&self, record: &ManifestRecord) -> Result<TripletSample> {
        let image = load_image(&self.root.join(&record.image_path))?;
        let edge = EdgeMap::load(&self.root.join(&record.edge_path))?;
        if (image.height(), image.width()) != (edge.height(), edge.width()) {
            return Err(Error::InvalidArgument(format!(
                "{}: image is {}x{}, edge map {}x{}",
                record.image_path.display(),
                image.height(),
                image.width(),
                edge.height(),
                edge.width()
            )));
        }
        if image.height() != self.resolution || image.width() != self.resolution {
            return Err(Error::InvalidArgument(format!(
                "{}: expected {}x{} image",
                record.image_path.display(),
                self.resolution,
                self.resolution
            )));
        }
        Ok(TripletSample {
            image: image.to_rgb(),
            edge,
            prompt: record.prompt.clone(),
            domain: record.domain,
        })
    }

    pub fn load_samples(&self) -> Result<Vec<TripletSample>> {
        self.records.iter().map(|r| self.load_sample(r)).collect()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.records.iter().filter(|r| r.domain == domain).count()
    }
}

/// Returns `""` with probability `p`, otherwise the prompt unchanged. Always
/// consumes exactly one draw.
pub fn prompt_dropout(prompt: &str, p: f64, rng: &mut Rng) -> Result<String> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p}")));
    }
    let drop = rng.bernoulli(p);
    Ok(if drop {
        String::new()
    } else {
        prompt.to_string()
    })
}

/// Maps file names to the artist whose name becomes the prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtistPattern {
    /// Case-insensitive substring of the file name.
    pub pattern: String,
    pub artist: String,
    pub domain: Domain,
}

impl ArtistPattern {
    pub fn new(pattern: &str, artist: &str, domain: Domain) -> Self {
        Self {
            pattern: pattern.to_string(),
            artist: artist.to_string(),
            domain,
        }
    }

    /// Parses lines of `pattern<TAB>artist name[<TAB>domain]`; `#` starts a comment.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                match f.as_slice() {
                    [p, a] => Ok(Self::new(p, a, Domain::Jiehua)),
                    [p, a, d] => Ok(Self::new(p, a, d.parse()?)),
                    _ => Err(Error::Config(format!("bad artist mapping line `{l}`"))),
                }
            })
            .collect()
    }
}

pub fn artist_prompt(artist: &str) -> String {
    format!("{artist} style")
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("ppm" | "pgm" | "png")
    )
}

fn write_record(
    out_dir: &Path,
    index: usize,
    stem: &str,
    image: &Image,
    edge: &EdgeMap,
    prompt: String,
    domain: Domain,
) -> Result<ManifestRecord> {
    let image_path = PathBuf::from("images").join(format!("{index:04}_{stem}.ppm"));
    let edge_path = PathBuf::from("edges").join(format!("{index:04}_{stem}.pgm"));
    save_image(image, &out_dir.join(&image_path))?;
    edge.save(&out_dir.join(&edge_path))?;
    Ok(ManifestRecord {
        image_path,
        edge_path,
        prompt,
        domain,
    })
}

fn prepare_out_dir(out_dir: &Path) -> Result<()> {
    for sub in ["images", "edges"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

/// Ingests every image under `image_dir` (lexicographic order): resize,
/// Canny, write image and edge files plus `manifest.tsv` into `out_dir`.
pub fn build_manifest(
    image_dir: &Path,
    artists: &[ArtistPattern],
    resolution: usize,
    canny_params: CannyParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(image_dir)
        .map_err(|e| Error::io(image_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no .ppm/.pgm/.png images found",
            image_dir.display()
        )));
    }
    let mut matched = Vec::with_capacity(paths.len());
    let mut unmatched = Vec::new();
    for p in &paths {
        let name = p.file_name().unwrap().to_string_lossy().to_lowercase();
        match artists
            .iter()
            .find(|a| name.contains(&a.pattern.to_lowercase()))
        {
            Some(a) => matched.push((p, a)),
            None => unmatched.push(p.display().to_string()),
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::Config(format!(
            "no artist pattern matches: {}",
            unmatched.join(", ")
        )));
    }
    prepare_out_dir(out_dir)?;
    let mut records = Vec::with_capacity(matched.len());
    for (i, (path, artist)) in matched.into_iter().enumerate() {
        let image = resize(&load_image(path)?.to_rgb(), resolution)?;
        let edge = canny(&image, canny_params)?;
        let stem = path
            .file_stem()
            .unwrap()
            .to_string_lossy()
            .replace(['\t', ' '], "_");
        records.push(write_record(
            out_dir,
            i,
            &stem,
            &image,
            &edge,
            artist_prompt(&artist.artist),
            artist.domain,
        )?);
    }
    let manifest = DatasetManifest {
        resolution,
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Generates `n_per_style` images of each synthetic style (ruled = jiehua,
/// wash = other) and writes them as a manifest directory.
pub fn synth_style_corpus(
    n_per_style: usize,
    resolution: usize,
    canny_params: CannyParams,
    rng: &mut Rng,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_per_style == 0 {
        return Err(Error::InvalidArgument("n_per_style must be >= 1".into()));
    }
    prepare_out_dir(out_dir)?;
    let mut records = Vec::with_capacity(2 * n_per_style);
    let mut index = 0;
    for (style, domain) in [(Style::Ruled, Domain::Jiehua), (Style::Wash, Domain::Other)] {
        for _ in 0..n_per_style {
            let image = synth_image(style, resolution, rng);
            let edge = canny(&image, canny_params)?;
            records.push(write_record(
                out_dir,
                index,
                style.artist(),
                &image,
                &edge,
                style.prompt().to_string(),
                domain,
            )?);
            index += 1;
        }
    }
    let manifest = DatasetManifest {
        resolution,
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Per-domain record counts and mean edge densities.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub per_domain: Vec<(Domain, usize, f64)>,
}

impl CorpusStats {
    pub fn of(samples: &[TripletSample]) -> Self {
        let mut per_domain = Vec::new();
        for d in [Domain::Jiehua, Domain::Other] {
            let ds: Vec<_> = samples.iter().filter(|s| s.domain == d).collect();
            if ds.is_empty() {
                continue;
            }
            let mean = ds.iter().map(|s| s.edge.density()).sum::<f64>() / ds.len() as f64;
            per_domain.push((d, ds.len(), mean));
        }
        Self { per_domain }
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (d, n, density) in &self.per_domain {
            writeln!(f, "{d}\t{n} records\tmean edge density {density:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_extremes() {
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            assert_eq!(prompt_dropout("a style", 0.0, &mut rng).unwrap(), "a style");
            assert_eq!(prompt_dropout("a style", 1.0, &mut rng).unwrap(), "");
        }
        assert!(prompt_dropout("x", 1.5, &mut rng).is_err());
    }

    #[test]
    fn dropout_rate_at_one_half() {
        let mut rng = Rng::new(99);
        let empty = (0..10_000)
            .filter(|_| prompt_dropout("p", 0.5, &mut rng).unwrap().is_empty())
            .count();
        let rate = empty as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&rate), "{rate}");
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = DatasetManifest {
            resolution: 64,
            records: vec![ManifestRecord {
                image_path: "images/a.ppm".into(),
                edge_path: "edges/a.pgm".into(),
                prompt: "Yao Wen Han style".into(),
                domain: Domain::Jiehua,
            }],
            root: PathBuf::from("/x"),
        };
        let back = DatasetManifest::parse(&m.to_text().unwrap(), Path::new("/x")).unwrap();
        assert_eq!(back, m);
        assert!(DatasetManifest::parse("resolution\t64\na\tb\tc\n", Path::new(".")).is_err());
    }

    #[test]
    fn artist_mapping_parses() {
        let list = ArtistPattern::parse_list(
            "# comment\nyao\tYao Wen Han\nzhang\tZhang Xiao Gang\tother\n",
        )
        .unwrap();
        assert_eq!(
            list[0],
            ArtistPattern::new("yao", "Yao Wen Han", Domain::Jiehua)
        );
        assert_eq!(list[1].domain, Domain::Other);
        assert!(ArtistPattern::parse_list("only-one-field").is_err());
    }
}
