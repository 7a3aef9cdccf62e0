//! Manifest serialization: one header line, then one record per line.
//!
//! ```text
//! #msoc-manifest schema=1 seed=42
//! sample_id=train_rarv_0000 audio_ref=audio/r0.arr visual_ref=video/r0.arr \
//!     audio_label=0 visual_label=0 av_label=0 synced=true category=RARV \
//!     gen_method=none split=train
//! ```
//!
//! Keys appear in a fixed order and values never contain whitespace, so the
//! format diffs cleanly and a byte-identical round trip is guaranteed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{BenchmarkManifest, Category, SampleRecord, Split, MANIFEST_SCHEMA_VERSION};

const HEADER_TAG: &str = "#msoc-manifest";

const KEYS: [&str; 10] = [
    "sample_id",
    "audio_ref",
    "visual_ref",
    "audio_label",
    "visual_label",
    "av_label",
    "synced",
    "category",
    "gen_method",
    "split",
];

pub fn to_string(m: &BenchmarkManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER_TAG} schema={} seed={}", m.schema_version, m.seed);
    for r in &m.entries {
        let _ = writeln!(
            out,
            "sample_id={} audio_ref={} visual_ref={} audio_label={} visual_label={} \
             av_label={} synced={} category={} gen_method={} split={}",
            r.sample_id,
            r.audio_ref,
            r.visual_ref,
            r.audio_label,
            r.visual_label,
            r.av_label,
            r.synced,
            r.category,
            r.gen_method,
            r.split,
        );
    }
    out
}

pub fn save(m: &BenchmarkManifest, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(m)).map_err(|e| Error::io(path, e))
}

pub fn from_str(text: &str, path: &Path) -> Result<BenchmarkManifest> {
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty manifest"))?;
    let mut header_parts = header.split_whitespace();
    if header_parts.next() != Some(HEADER_TAG) {
        return Err(parse_err(path, 1, format!("expected `{HEADER_TAG}` header")));
    }
    let mut schema = None;
    let mut seed = None;
    for part in header_parts {
        match part.split_once('=') {
            Some(("schema", v)) => schema = Some(v.to_string()),
            Some(("seed", v)) => {
                seed = Some(v.parse::<u64>().map_err(|_| {
                    parse_err(path, 1, format!("seed must be an integer, got `{v}`"))
                })?)
            }
            _ => return Err(parse_err(path, 1, format!("unexpected header field `{part}`"))),
        }
    }
    let schema = schema.ok_or_else(|| parse_err(path, 1, "header missing schema"))?;
    if schema != MANIFEST_SCHEMA_VERSION {
        return Err(parse_err(
            path,
            1,
            format!("unsupported schema `{schema}` (expected {MANIFEST_SCHEMA_VERSION})"),
        ));
    }
    let seed = seed.ok_or_else(|| parse_err(path, 1, "header missing seed"))?;

    let mut entries = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(parse_record(line, path, lineno)?);
    }

    Ok(BenchmarkManifest {
        schema_version: schema,
        seed,
        entries,
    })
}

pub fn load(path: &Path) -> Result<BenchmarkManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, path)
}

fn parse_record(line: &str, path: &Path, lineno: usize) -> Result<SampleRecord> {
    let mut values: [Option<&str>; KEYS.len()] = Default::default();
    for part in line.split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| parse_err(path, lineno, format!("expected key=value, got `{part}`")))?;
        let slot = KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| parse_err(path, lineno, format!("unknown key `{key}`")))?;
        if values[slot].replace(value).is_some() {
            return Err(parse_err(path, lineno, format!("duplicate key `{key}`")));
        }
    }
    let get = |slot: usize| -> Result<&str> {
        values[slot].ok_or_else(|| parse_err(path, lineno, format!("missing key `{}`", KEYS[slot])))
    };

    let label = |slot: usize| -> Result<u8> {
        let v = get(slot)?;
        match v {
            "0" => Ok(0),
            "1" => Ok(1),
            _ => Err(parse_err(
                path,
                lineno,
                format!("{} must be 0 or 1, got `{v}`", KEYS[slot]),
            )),
        }
    };

    let synced = match get(6)? {
        "true" => true,
        "false" => false,
        v => {
            return Err(parse_err(
                path,
                lineno,
                format!("synced must be true or false, got `{v}`"),
            ))
        }
    };

    Ok(SampleRecord {
        sample_id: get(0)?.to_string(),
        audio_ref: get(1)?.to_string(),
        visual_ref: get(2)?.to_string(),
        audio_label: label(3)?,
        visual_label: label(4)?,
        av_label: label(5)?,
        synced,
        category: Category::parse(get(7)?).map_err(|e| parse_err(path, lineno, e.to_string()))?,
        gen_method: get(8)?.to_string(),
        split: Split::parse(get(9)?).map_err(|e| parse_err(path, lineno, e.to_string()))?,
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize, category: Category, split: Split) -> SampleRecord {
        let (a, v, synced) = match category {
            Category::Rarv => (0, 0, true),
            Category::Farv => (1, 0, true),
            Category::Rafv => (0, 1, true),
            Category::Fafv => (1, 1, true),
            Category::Unsynced => (0, 0, false),
        };
        SampleRecord {
            sample_id: format!("s{i}"),
            audio_ref: format!("audio/{i}.arr"),
            visual_ref: format!("video/{i}.arr"),
            audio_label: a,
            visual_label: v,
            av_label: crate::types::expected_av_label(a, v, synced),
            synced,
            category,
            gen_method: if category == Category::Rarv {
                "none".into()
            } else {
                "methodx".into()
            },
            split,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = BenchmarkManifest::new(
            42,
            vec![
                sample(0, Category::Rarv, Split::Train),
                sample(1, Category::Farv, Split::Val),
                sample(2, Category::Unsynced, Split::Test),
            ],
        );
        let text = to_string(&m);
        let back = from_str(&text, Path::new("<mem>")).unwrap();
        assert_eq!(m, back);
        assert_eq!(text, to_string(&back));
    }

    #[test]
    fn shift_fragment_survives_round_trip() {
        let mut r = sample(0, Category::Unsynced, Split::Test);
        r.audio_ref = "audio/0.arr#shift=17".into();
        let m = BenchmarkManifest::new(7, vec![r]);
        let back = from_str(&to_string(&m), Path::new("<mem>")).unwrap();
        assert_eq!(back.entries[0].audio_ref, "audio/0.arr#shift=17");
    }

    #[test]
    fn rejects_malformed_lines() {
        let text = "#msoc-manifest schema=1 seed=0\nsample_id=s0 audio_ref=a\n";
        let err = from_str(text, Path::new("m.txt")).unwrap_err();
        assert!(err.to_string().contains("m.txt:2"), "{err}");

        let text = "#msoc-manifest schema=1 seed=0\nnot_a_key=v\n";
        assert!(from_str(text, Path::new("m.txt")).is_err());

        let text = "#wrong-header schema=1 seed=0\n";
        assert!(from_str(text, Path::new("m.txt")).is_err());

        let text = "#msoc-manifest schema=9 seed=0\n";
        assert!(from_str(text, Path::new("m.txt")).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let m = BenchmarkManifest::new(3, vec![sample(0, Category::Fafv, Split::Test)]);
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }
}
