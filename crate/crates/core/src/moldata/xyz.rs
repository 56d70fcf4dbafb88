//! Multi-frame XYZ reading and writing.
//!
//! Frame layout: atom count, a comment line that may carry `energy=<float>`,
//! then one `<symbol> x y z [fx fy fz]` line per atom.

use std::fmt::Write as _;

use super::elements::{atomic_number, symbol};
use super::molecule::Molecule;
use crate::error::{Error, Result};

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_energy(comment: &str, line: usize) -> Result<Option<f64>> {
    for tok in comment.split_whitespace() {
        let Some((key, val)) = tok.split_once('=') else {
            continue;
        };
        if key.eq_ignore_ascii_case("energy") {
            return val
                .parse::<f64>()
                .map(Some)
                .map_err(|_| parse_err(line, format!("bad energy value {val:?}")));
        }
    }
    Ok(None)
}

fn parse_floats(toks: &[&str], line: usize) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (o, t) in out.iter_mut().zip(toks) {
        *o = t
            .parse::<f64>()
            .map_err(|_| parse_err(line, format!("non-numeric value {t:?}")))?;
    }
    Ok(out)
}

pub fn parse_xyz(text: &str) -> Result<Vec<Molecule>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            // only trailing blank lines are tolerated between frames
            if lines[i..].iter().all(|l| l.trim().is_empty()) {
                break;
            }
            return Err(parse_err(i + 1, "blank line where an atom count was expected"));
        }
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| parse_err(i + 1, format!("malformed atom count {:?}", lines[i].trim())))?;
        if n == 0 {
            return Err(parse_err(i + 1, "atom count must be positive"));
        }
        let comment_line = i + 1;
        let comment = lines
            .get(comment_line)
            .ok_or_else(|| parse_err(comment_line + 1, "missing comment line"))?;
        let energy = parse_energy(comment, comment_line + 1)?;

        let mut z = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut forces = Vec::with_capacity(n);
        for a in 0..n {
            let ln = i + 2 + a;
            let line = lines
                .get(ln)
                .ok_or_else(|| parse_err(ln + 1, format!("expected {n} atom lines")))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 && toks.len() != 7 {
                return Err(parse_err(
                    ln + 1,
                    format!("expected 4 or 7 columns, got {}", toks.len()),
                ));
            }
            let zi =
                atomic_number(toks[0]).ok_or_else(|| parse_err(ln + 1, format!("unknown element {:?}", toks[0])))?;
            z.push(zi);
            positions.push(parse_floats(&toks[1..4], ln + 1)?);
            if toks.len() == 7 {
                forces.push(parse_floats(&toks[4..7], ln + 1)?);
            }
            if !forces.is_empty() && forces.len() != a + 1 {
                return Err(parse_err(ln + 1, "force columns present on some atoms only"));
            }
        }
        let forces = (!forces.is_empty()).then_some(forces);
        let mol = Molecule {
            z,
            positions,
            energy,
            forces,
        };
        mol.validate().map_err(|e| parse_err(i + 1, e.to_string()))?;
        frames.push(mol);
        i += 2 + n;
    }
    Ok(frames)
}

/// Writes frames with shortest round-trip float formatting.
pub fn write_xyz(molecules: &[Molecule]) -> String {
    let mut out = String::new();
    for m in molecules {
        let _ = writeln!(out, "{}", m.len());
        match m.energy {
            Some(e) => {
                let _ = writeln!(out, "energy={e:?}");
            }
            None => out.push('\n'),
        }
        for (a, (z, p)) in m.z.iter().zip(&m.positions).enumerate() {
            let sym = symbol(*z).map(str::to_string).unwrap_or_else(|| z.to_string());
            let _ = write!(out, "{sym} {:?} {:?} {:?}", p[0], p[1], p[2]);
            if let Some(f) = &m.forces {
                let _ = write!(out, " {:?} {:?} {:?}", f[a][0], f[a][1], f[a][2]);
            }
            out.push('\n');
        }
    }
    out
}
