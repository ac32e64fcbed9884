//! CSV formats for gaze streams and fixation lists.
//!
//! Gaze: `t_ms,x_px,y_px,pupil_mm,valid` with `pupil_mm` possibly empty and
//! `valid` in {0,1}. Fixations: `cx_px,cy_px,start_ms,end_ms`.

use std::fmt::Write as _;
use std::path::Path;

use super::{Fixation, GazeSample};
use crate::error::{Error, Result};
use crate::fsutil;

const GAZE_HEADER: [&str; 5] = ["t_ms", "x_px", "y_px", "pupil_mm", "valid"];
const FIXATION_HEADER: [&str; 4] = ["cx_px", "cy_px", "start_ms", "end_ms"];

fn records<'a>(
    path: &'a Path,
    text: &'a str,
    header: &'static [&'static str],
) -> Result<impl Iterator<Item = Result<(usize, csv::StringRecord)>> + 'a> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let got = rdr
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if got.iter().collect::<Vec<_>>() != header {
        // an empty file is treated as an empty list
        if !(got.is_empty() && text.trim().is_empty()) {
            return Err(Error::parse(
                path,
                1,
                format!("expected header `{}`", header.join(",")),
            ));
        }
    }
    Ok(rdr.into_records().map(move |r| {
        let rec = r.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        Ok((line, rec))
    }))
}

fn float(path: &Path, line: usize, name: &str, s: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::parse(path, line, format!("{name}: not a finite number: `{s}`"))),
    }
}

pub fn parse_gaze_csv(path: &Path, text: &str) -> Result<Vec<GazeSample>> {
    let mut out: Vec<GazeSample> = Vec::new();
    for r in records(path, text, &GAZE_HEADER)? {
        let (line, rec) = r?;
        let t_ms = float(path, line, "t_ms", &rec[0])?;
        if t_ms < 0.0 {
            return Err(Error::parse(path, line, "t_ms must be non-negative"));
        }
        let x_px = float(path, line, "x_px", &rec[1])?;
        let y_px = float(path, line, "y_px", &rec[2])?;
        let pupil_mm = match &rec[3] {
            "" => None,
            s => {
                let p = float(path, line, "pupil_mm", s)?;
                if p < 0.0 {
                    return Err(Error::parse(path, line, "pupil_mm must be non-negative"));
                }
                Some(p)
            }
        };
        let valid = match &rec[4] {
            "1" => true,
            "0" => false,
            s => return Err(Error::parse(path, line, format!("valid must be 0 or 1, got `{s}`"))),
        };
        if let Some(prev) = out.last() {
            if !(t_ms > prev.t_ms) {
                return Err(Error::parse(
                    path,
                    line,
                    format!("t_ms {t_ms} does not increase (previous {})", prev.t_ms),
                ));
            }
        }
        out.push(GazeSample {
            t_ms,
            x_px,
            y_px,
            pupil_mm,
            valid,
        });
    }
    Ok(out)
}

pub fn parse_fixations_csv(path: &Path, text: &str) -> Result<Vec<Fixation>> {
    let mut out = Vec::new();
    for r in records(path, text, &FIXATION_HEADER)? {
        let (line, rec) = r?;
        let f = Fixation {
            cx_px: float(path, line, "cx_px", &rec[0])?,
            cy_px: float(path, line, "cy_px", &rec[1])?,
            start_ms: float(path, line, "start_ms", &rec[2])?,
            end_ms: float(path, line, "end_ms", &rec[3])?,
            n_samples: 0,
        };
        if f.end_ms < f.start_ms {
            return Err(Error::parse(path, line, "end_ms before start_ms"));
        }
        out.push(f);
    }
    Ok(out)
}

pub fn read_gaze_csv(path: &Path) -> Result<Vec<GazeSample>> {
    parse_gaze_csv(path, &fsutil::read_string(path)?)
}

pub fn read_fixations_csv(path: &Path) -> Result<Vec<Fixation>> {
    parse_fixations_csv(path, &fsutil::read_string(path)?)
}

pub fn gaze_to_csv(samples: &[GazeSample]) -> String {
    let mut s = GAZE_HEADER.join(",");
    s.push('\n');
    for g in samples {
        let pupil = g.pupil_mm.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", g.t_ms, g.x_px, g.y_px, pupil, u8::from(g.valid));
    }
    s
}

pub fn fixations_to_csv(fixations: &[Fixation]) -> String {
    let mut s = FIXATION_HEADER.join(",");
    s.push('\n');
    for f in fixations {
        let _ = writeln!(s, "{},{},{},{}", f.cx_px, f.cy_px, f.start_ms, f.end_ms);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_empty_pupil_and_flags() {
        let text = "t_ms,x_px,y_px,pupil_mm,valid\n0,1.5,2,,1\n16,3,4,3.2,0\n";
        let g = parse_gaze_csv(Path::new("g.csv"), text).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].pupil_mm, None);
        assert_eq!(g[1].pupil_mm, Some(3.2));
        assert!(g[0].valid && !g[1].valid);
    }

    #[test]
    fn decreasing_time_cites_line() {
        let text = "t_ms,x_px,y_px,pupil_mm,valid\n0,1,1,,1\n20,1,1,,1\n10,1,1,,1\n";
        let err = parse_gaze_csv(Path::new("gaze.csv"), text).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e}"),
        }
        assert!(err_text(text).contains("gaze.csv:4"));
    }

    fn err_text(text: &str) -> String {
        parse_gaze_csv(Path::new("gaze.csv"), text).unwrap_err().to_string()
    }

    #[test]
    fn malformed_rows() {
        assert!(err_text("t_ms,x_px,y_px,pupil_mm,valid\n0,1,1,,2\n").contains(":2"));
        assert!(err_text("t_ms,x_px,y_px,pupil_mm,valid\n0,abc,1,,1\n").contains("x_px"));
        assert!(err_text("t,x,y\n").contains("header"));
        assert!(err_text("t_ms,x_px,y_px,pupil_mm,valid\n-1,1,1,,1\n").contains("non-negative"));
    }

    #[test]
    fn empty_file_and_header_only() {
        assert!(parse_gaze_csv(Path::new("g"), "").unwrap().is_empty());
        assert!(parse_fixations_csv(Path::new("f"), "cx_px,cy_px,start_ms,end_ms\n")
            .unwrap()
            .is_empty());
    }

    proptest! {
        #[test]
        fn gaze_csv_round_trip(rows in prop::collection::vec((0.01f64..50.0, -1e3f64..1e3, -1e3f64..1e3, prop::option::of(0.0f64..9.0), any::<bool>()), 0..40)) {
            let mut t = 0.0;
            let samples: Vec<GazeSample> = rows.into_iter().map(|(dt, x, y, p, v)| {
                t += dt;
                GazeSample { t_ms: t, x_px: x, y_px: y, pupil_mm: p, valid: v }
            }).collect();
            let back = parse_gaze_csv(Path::new("g"), &gaze_to_csv(&samples)).unwrap();
            prop_assert_eq!(back, samples);
        }

        #[test]
        fn fixation_csv_round_trip(rows in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, 0.0f64..1e4, 0.0f64..1e3), 0..20)) {
            let f: Vec<Fixation> = rows.into_iter().map(|(x, y, s, d)| Fixation {
                cx_px: x, cy_px: y, start_ms: s, end_ms: s + d, n_samples: 0,
            }).collect();
            let back = parse_fixations_csv(Path::new("f"), &fixations_to_csv(&f)).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
