use std::path::Path;

use crate::domain::{Minutia, MinutiaKind};
use crate::error::{Error, Result};

/// Read a whitespace-separated `x y theta quality [kind]` file, one
/// minutia per line. Blank lines and `#` comments are skipped.
///
/// A quality written with a decimal point and at most 1.0 is a fraction
/// and is scaled by 100; anything else is taken as already on 0..=100.
/// The optional fifth field accepts `RIG`/`ending` and `BIF`/`bifurcation`;
/// without it the kind defaults to ending.
pub fn import_mindtct(path: &Path) -> Result<Vec<Minutia>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mindtct(path, &text)
}

pub fn parse_mindtct(path: &Path, text: &str) -> Result<Vec<Minutia>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(bad(format!(
                "expected 4 or 5 fields (x y theta quality [kind]), found {}",
                fields.len()
            )));
        }
        let x: u32 = fields[0].parse().map_err(|_| bad(format!("bad x coordinate {:?}", fields[0])))?;
        let y: u32 = fields[1].parse().map_err(|_| bad(format!("bad y coordinate {:?}", fields[1])))?;
        let theta: f64 = fields[2]
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| bad(format!("bad theta {:?}", fields[2])))?;
        let qv: f64 = fields[3]
            .parse()
            .ok()
            .filter(|q: &f64| q.is_finite() && *q >= 0.0)
            .ok_or_else(|| bad(format!("bad quality {:?}", fields[3])))?;
        let fractional = fields[3].contains(['.', 'e', 'E']) && qv <= 1.0;
        let q = if fractional { qv * 100.0 } else { qv };
        if q > 100.0 {
            return Err(bad(format!("quality {} above 100", fields[3])));
        }
        let kind = match fields.get(4).map(|k| k.to_ascii_lowercase()) {
            None => MinutiaKind::Ending,
            Some(k) if k == "rig" || k == "ending" => MinutiaKind::Ending,
            Some(k) if k == "bif" || k == "bifurcation" => MinutiaKind::Bifurcation,
            Some(k) => return Err(bad(format!("unknown minutia kind {k:?}"))),
        };
        out.push(Minutia::new(x, y, theta, q.round() as u8, kind));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<Minutia>> {
        parse_mindtct(Path::new("t.xyt"), s)
    }

    #[test]
    fn fractional_quality_is_scaled() {
        let m = parse("120 85 90 0.47\n").unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].x, m[0].y, m[0].theta, m[0].quality), (120, 85, 90.0, 47));
    }

    #[test]
    fn integer_quality_is_kept() {
        let m = parse("1 2 45 1\n3 4 10 88 BIF\n").unwrap();
        assert_eq!(m[0].quality, 1);
        assert_eq!(m[1].quality, 88);
        assert_eq!(m[1].kind, MinutiaKind::Bifurcation);
    }

    #[test]
    fn empty_file_gives_empty_list() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("\n# header\n\n").unwrap().is_empty());
    }

    #[test]
    fn short_line_names_its_number() {
        let err = parse("1 2 3 40\n5 6 7\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        assert!(parse("1 2 3 400\n").is_err());
        assert!(parse("-1 2 3 40\n").is_err());
    }

    #[test]
    fn reads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyt");
        std::fs::write(&p, "10 20 370 0.5\n").unwrap();
        let m = import_mindtct(&p).unwrap();
        assert_eq!((m[0].theta, m[0].quality), (10.0, 50));
        assert!(import_mindtct(&dir.path().join("missing")).is_err());
    }
}
