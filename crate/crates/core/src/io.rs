//! Matrix file formats.
//!
//! Text: a header line `# kind=<kind> dim=D n=N [labels=1]` followed by one
//! comma-separated row per sample, with an optional trailing integer label.
//!
//! Binary (little-endian): magic `TPDD`, u32 version, u32 kind, u64 N, u64 D,
//! N·D f64 row-major, then a label flag byte and, if set, N u64 labels.
//!
//! Readers detect the encoding from the first bytes. Writes go to a temporary
//! file in the target directory and are renamed into place.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::FeatureMatrix;

pub const MAGIC: &[u8; 4] = b"TPDD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Features,
    Logits,
    Scores,
    Landscape,
    OodFar,
    OodNear,
}

impl FileKind {
    pub const ALL: [FileKind; 6] = [
        FileKind::Features,
        FileKind::Logits,
        FileKind::Scores,
        FileKind::Landscape,
        FileKind::OodFar,
        FileKind::OodNear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FileKind::Features => "features",
            FileKind::Logits => "logits",
            FileKind::Scores => "scores",
            FileKind::Landscape => "landscape",
            FileKind::OodFar => "ood_far",
            FileKind::OodNear => "ood_near",
        }
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for FileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown file kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Text,
    Binary,
}

impl Encoding {
    /// `.txt` and `.csv` select text, anything else binary.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("txt") || e.eq_ignore_ascii_case("csv") => Encoding::Text,
            _ => Encoding::Binary,
        }
    }
}

pub fn encode_text(matrix: &FeatureMatrix, kind: FileKind) -> String {
    let mut out = format!("# kind={kind} dim={} n={}", matrix.ncols(), matrix.nrows());
    if matrix.labels().is_some() {
        out.push_str(" labels=1");
    }
    out.push('\n');
    for (i, row) in matrix.iter_rows().enumerate() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            // Debug formatting is the shortest string that parses back exactly
            out.push_str(&format!("{v:?}"));
        }
        if let Some(labels) = matrix.labels() {
            out.push_str(&format!(",{}", labels[i]));
        }
        out.push('\n');
    }
    out
}

struct TextHeader {
    kind: FileKind,
    dim: usize,
    n: usize,
    labels: bool,
}

fn parse_header(line: &str) -> Result<TextHeader> {
    let loc = "line 1";
    let rest = line
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(loc, "header must start with '#'"))?;
    let (mut kind, mut dim, mut n, mut labels) = (None, None, None, false);
    for token in rest.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| Error::parse(loc, format!("expected key=value, found '{token}'")))?;
        let count = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::parse(loc, format!("bad {key} value '{value}'")))
        };
        match key {
            "kind" => kind = Some(value.parse::<FileKind>().map_err(|e| Error::parse(loc, e.to_string()))?),
            "dim" => dim = Some(count()?),
            "n" => n = Some(count()?),
            "labels" => match value {
                "0" => labels = false,
                "1" => labels = true,
                _ => return Err(Error::parse(loc, format!("bad labels value '{value}'"))),
            },
            _ => return Err(Error::parse(loc, format!("unknown header key '{key}'"))),
        }
    }
    let missing = |k: &str| Error::parse(loc, format!("header is missing {k}"));
    Ok(TextHeader {
        kind: kind.ok_or_else(|| missing("kind"))?,
        dim: dim.ok_or_else(|| missing("dim"))?,
        n: n.ok_or_else(|| missing("n"))?,
        labels,
    })
}

pub fn decode_text(text: &str) -> Result<(FileKind, FeatureMatrix)> {
    let mut lines = text.lines();
    let header = parse_header(lines.next().ok_or_else(|| Error::parse("line 1", "empty file"))?)?;
    if header.dim == 0 || header.n == 0 {
        return Err(Error::parse("line 1", "dim and n must be positive"));
    }
    let width = header.dim + usize::from(header.labels);
    let mut data = Vec::with_capacity(header.n * header.dim);
    let mut labels = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines.enumerate() {
        let loc = format!("line {}", idx + 2);
        if rows == header.n {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::parse(loc, format!("more rows than the declared n={}", header.n)));
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(Error::parse(
                loc,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        for f in &fields[..header.dim] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(&loc, format!("not a number: '{f}'")))?;
            if !v.is_finite() {
                return Err(Error::parse(&loc, format!("non-finite value '{f}'")));
            }
            data.push(v);
        }
        if header.labels {
            let f = fields[header.dim];
            labels.push(
                f.parse::<usize>()
                    .map_err(|_| Error::parse(&loc, format!("bad label '{f}'")))?,
            );
        }
        rows += 1;
    }
    if rows != header.n {
        return Err(Error::parse(
            format!("line {}", rows + 2),
            format!("expected {} rows, found {rows}", header.n),
        ));
    }
    let m = FeatureMatrix::new(header.n, header.dim, data)?;
    let m = if header.labels { m.with_labels(labels)? } else { m };
    Ok((header.kind, m))
}

pub fn encode_binary(matrix: &FeatureMatrix, kind: FileKind) -> Vec<u8> {
    let n = matrix.nrows();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * matrix.data().len() + 1 + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&kind.code().to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.ncols() as u64).to_le_bytes());
    for v in matrix.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match matrix.labels() {
        Some(labels) => {
            out.push(1);
            for &l in labels {
                out.extend_from_slice(&(l as u64).to_le_bytes());
            }
        }
        None => out.push(0),
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                format!("byte offset {}", self.pos),
                format!("truncated while reading {what}"),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<(FileKind, FeatureMatrix)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::parse("byte offset 0", "bad magic"));
    }
    let version = c.u32("version")?;
    if version > FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let code = c.u32("kind")?;
    let kind = FileKind::from_code(code)
        .ok_or_else(|| Error::parse("byte offset 8", format!("unknown kind code {code}")))?;
    let n = c.u64("row count")? as usize;
    let d = c.u64("column count")? as usize;
    if n == 0 || d == 0 {
        return Err(Error::parse("byte offset 12", "N and D must be positive"));
    }
    let len = n
        .checked_mul(d)
        .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| Error::parse("byte offset 12", "declared shape exceeds file size"))?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        let at = c.pos;
        let v = f64::from_le_bytes(c.take(8, "values")?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::parse(format!("byte offset {at}"), "non-finite value"));
        }
        data.push(v);
    }
    let m = FeatureMatrix::new(n, d, data)?;
    // files that end right after the values carry no labels
    let flag = if c.pos == bytes.len() { 0 } else { c.take(1, "label flag")?[0] };
    let m = match flag {
        0 => m,
        1 => {
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let l = c.u64("labels")?;
                labels.push(usize::try_from(l).map_err(|_| Error::parse(format!("byte offset {}", c.pos - 8), "label too large"))?);
            }
            m.with_labels(labels)?
        }
        other => {
            return Err(Error::parse(
                format!("byte offset {}", c.pos - 1),
                format!("bad label flag {other}"),
            ))
        }
    };
    if c.pos != bytes.len() {
        return Err(Error::parse(format!("byte offset {}", c.pos), "trailing bytes"));
    }
    Ok((kind, m))
}

pub fn decode(bytes: &[u8]) -> Result<(FileKind, FeatureMatrix)> {
    if bytes.starts_with(MAGIC) {
        return decode_binary(bytes);
    }
    let text = std::str::from_utf8(bytes).map_err(|e| {
        Error::parse(format!("byte offset {}", e.valid_up_to()), "neither binary nor UTF-8 text")
    })?;
    decode_text(text)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(FileKind, FeatureMatrix)> {
    decode(&fs::read(path)?)
}

pub fn write_matrix(matrix: &FeatureMatrix, kind: FileKind, path: &Path, encoding: Encoding) -> Result<()> {
    let bytes = match encoding {
        Encoding::Text => encode_text(matrix, kind).into_bytes(),
        Encoding::Binary => encode_binary(matrix, kind),
    };
    write_atomic(path, &bytes)
}

/// Reads a matrix of any kind except scores.
pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let (kind, m) = read_matrix(path)?;
    if kind == FileKind::Scores {
        return Err(Error::invalid(format!("{} holds scores, not features", path.display())));
    }
    Ok(m)
}

/// Encoding follows the file extension.
pub fn write_features(matrix: &FeatureMatrix, path: &Path) -> Result<()> {
    write_matrix(matrix, FileKind::Features, path, Encoding::for_path(path))
}

pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let (_, m) = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::invalid(format!(
            "{} has {} columns, a score file has one",
            path.display(),
            m.ncols()
        )));
    }
    Ok(m.data().to_vec())
}

/// Always text, one score per line.
pub fn write_scores(scores: &[f64], path: &Path) -> Result<()> {
    let m = FeatureMatrix::new(scores.len(), 1, scores.to_vec())?;
    write_matrix(&m, FileKind::Scores, path, Encoding::Text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> FeatureMatrix {
        FeatureMatrix::new(3, 2, vec![0.1, -2.5, 1e-300, 3.0, f64::MAX, -0.0])
            .unwrap()
            .with_labels(vec![0, 2, 1])
            .unwrap()
    }

    #[test]
    fn text_layout() {
        let m = FeatureMatrix::new(2, 2, vec![1.0, 2.5, -3.0, 0.125]).unwrap();
        assert_eq!(
            encode_text(&m, FileKind::Features),
            "# kind=features dim=2 n=2\n1.0,2.5\n-3.0,0.125\n"
        );
        let labelled = m.with_labels(vec![1, 0]).unwrap();
        assert!(encode_text(&labelled, FileKind::Features).starts_with("# kind=features dim=2 n=2 labels=1\n1.0,2.5,1\n"));
    }

    #[test]
    fn binary_layout() {
        let m = FeatureMatrix::new(1, 2, vec![1.0, -2.0]).unwrap();
        let b = encode_binary(&m, FileKind::Logits);
        assert_eq!(&b[..4], b"TPDD");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[28..36].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 28 + 16 + 1);
        // label block may be omitted entirely
        assert_eq!(decode_binary(&b[..b.len() - 1]).unwrap().1, m);
    }

    #[test]
    fn round_trips_are_bitwise() {
        let m = sample();
        for enc in [encode_text(&m, FileKind::OodFar).into_bytes(), encode_binary(&m, FileKind::OodFar)] {
            let (kind, back) = decode(&enc).unwrap();
            assert_eq!(kind, FileKind::OodFar);
            assert_eq!(back.labels(), m.labels());
            for (a, b) in back.data().iter().zip(m.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn wrong_arity_names_the_line() {
        let err = decode_text("# kind=features dim=2 n=3\n1,2\n3,4,5\n6,7\n").unwrap_err();
        match err {
            Error::Parse { location, message } => {
                assert_eq!(location, "line 3");
                assert!(message.contains("expected 2 fields"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_headers() {
        for bad in ["NaN", "inf", "-inf", "infinity", "abc"] {
            let text = format!("# kind=features dim=1 n=1\n{bad}\n");
            assert!(matches!(decode_text(&text), Err(Error::Parse { .. })), "{bad}");
        }
        for header in ["kind=features dim=1 n=1", "# dim=1 n=1", "# kind=bogus dim=1 n=1", "# kind=features dim=x n=1", "# kind=features dim=1 n=1 extra=2"] {
            assert!(decode_text(&format!("{header}\n1\n")).is_err(), "{header}");
        }
        assert!(decode_text("# kind=features dim=1 n=2\n1\n").is_err());
        assert!(decode_text("# kind=features dim=1 n=1\n1\n2\n").is_err());
    }

    #[test]
    fn binary_rejects_corruption() {
        let b = encode_binary(&sample(), FileKind::Features);
        assert!(decode_binary(&b[..30]).is_err());
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(decode_binary(&v), Err(Error::Version { found: 9, .. })));
        let mut v = b.clone();
        v.push(0);
        assert!(decode_binary(&v).is_err());
        let mut v = b.clone();
        v[28..36].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_binary(&v).is_err());
        let mut v = b;
        v[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_binary(&v).is_err());
    }

    #[test]
    fn file_round_trip_and_extension_choice() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample();
        let bin = dir.path().join("m.tpdd");
        let txt = dir.path().join("m.txt");
        write_features(&m, &bin).unwrap();
        write_features(&m, &txt).unwrap();
        assert!(fs::read(&bin).unwrap().starts_with(MAGIC));
        assert!(fs::read(&txt).unwrap().starts_with(b"# kind=features"));
        assert_eq!(read_features(&bin).unwrap(), m);
        assert_eq!(read_features(&txt).unwrap(), m);

        let s = dir.path().join("s.txt");
        write_scores(&[-1.5, 0.0, 2.0], &s).unwrap();
        assert_eq!(read_scores(&s).unwrap(), vec![-1.5, 0.0, 2.0]);
        assert!(read_features(&s).is_err());
        assert!(read_scores(&bin).is_err());
        let leftovers = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 3);
    }

    proptest! {
        #[test]
        fn any_finite_matrix_round_trips(
            rows in 1usize..8,
            cols in 1usize..5,
            seed in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 40),
            labelled in any::<bool>(),
        ) {
            let data: Vec<f64> = seed.iter().cycle().take(rows * cols).copied().collect();
            let mut m = FeatureMatrix::new(rows, cols, data).unwrap();
            if labelled {
                m = m.with_labels((0..rows).map(|i| i * 7).collect()).unwrap();
            }
            let text = decode_text(&encode_text(&m, FileKind::Features)).unwrap().1;
            let bin = decode_binary(&encode_binary(&m, FileKind::Features)).unwrap().1;
            prop_assert_eq!(&text, &m);
            prop_assert_eq!(&bin, &m);
            let bits = |x: &FeatureMatrix| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&text), bits(&m));
        }
    }
}
