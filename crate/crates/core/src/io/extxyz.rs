//! Extended XYZ reader and writer.
//!
//! The writer emits `Lattice`, `Properties`, `energy` and `pbc` (in that
//! order) followed by any extra comment-line entries verbatim. Floats use 17
//! significant digits so values survive a round trip unchanged.

use std::fmt::Write as _;

use super::{elements, IoError, Result};
use crate::geometry::{AtomArray, Cell, Structure, Vec3};

#[derive(Debug, Clone, PartialEq)]
struct Property {
    name: String,
    kind: char,
    columns: usize,
}

fn err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        message: msg.into(),
    }
}

/// Splits a comment line into `key=value` pairs. Values may be double
/// quoted; the raw value text (quotes included) is returned alongside the
/// unquoted content.
fn split_comment(line: &str, lineno: usize) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    let mut chars = line.char_indices().peekable();
    loop {
        while chars.peek().is_some_and(|(_, c)| c.is_whitespace()) {
            chars.next();
        }
        let Some(&(start, _)) = chars.peek() else {
            break;
        };
        let mut key_end = line.len();
        let mut has_value = false;
        while let Some(&(i, c)) = chars.peek() {
            if c == '=' {
                key_end = i;
                has_value = true;
                chars.next();
                break;
            }
            if c.is_whitespace() {
                key_end = i;
                break;
            }
            chars.next();
        }
        let key = line[start..key_end].to_string();
        if key.is_empty() {
            return Err(err(lineno, "empty key in comment line"));
        }
        if !has_value {
            out.push((key, "T".into(), "T".into()));
            continue;
        }
        let vstart = chars.peek().map(|&(i, _)| i).unwrap_or(line.len());
        if chars.peek().is_some_and(|&(_, c)| c == '"') {
            chars.next();
            let mut end = None;
            for (i, c) in chars.by_ref() {
                if c == '"' {
                    end = Some(i);
                    break;
                }
            }
            let end = end.ok_or_else(|| err(lineno, format!("unterminated quote for {key}")))?;
            out.push((
                key,
                line[vstart + 1..end].to_string(),
                line[vstart..=end].to_string(),
            ));
        } else {
            let mut vend = line.len();
            while let Some(&(i, c)) = chars.peek() {
                if c.is_whitespace() {
                    vend = i;
                    break;
                }
                chars.next();
            }
            let v = line[vstart..vend].to_string();
            out.push((key, v.clone(), v));
        }
    }
    Ok(out)
}

fn parse_properties(spec: &str, lineno: usize) -> Result<Vec<Property>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() % 3 != 0 || parts.is_empty() {
        return Err(err(lineno, format!("malformed Properties {spec:?}")));
    }
    let mut props = Vec::new();
    for p in parts.chunks(3) {
        let kind = match p[1] {
            "S" | "R" | "I" | "L" => p[1].chars().next().unwrap_or('S'),
            other => return Err(err(lineno, format!("unknown property type {other:?}"))),
        };
        let columns: usize = p[2]
            .parse()
            .map_err(|_| err(lineno, format!("bad column count {:?}", p[2])))?;
        if columns == 0 {
            return Err(err(lineno, "property with zero columns"));
        }
        props.push(Property {
            name: p[0].to_string(),
            kind,
            columns,
        });
    }
    Ok(props)
}

fn parse_f64(tok: &str, lineno: usize) -> Result<f64> {
    tok.parse()
        .map_err(|_| err(lineno, format!("invalid number {tok:?}")))
}

fn parse_bool(tok: &str, lineno: usize) -> Result<bool> {
    match tok {
        "T" | "True" | "true" | "1" => Ok(true),
        "F" | "False" | "false" | "0" => Ok(false),
        _ => Err(err(lineno, format!("invalid logical {tok:?}"))),
    }
}

/// Parses every frame of an extended XYZ document.
pub fn parse_extxyz(text: &str) -> Result<Vec<Structure>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let lineno = i + 1;
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| err(lineno, format!("malformed atom count {:?}", lines[i])))?;
        if n == 0 {
            return Err(err(lineno, "frame with zero atoms"));
        }
        let comment = lines
            .get(i + 1)
            .ok_or_else(|| err(lineno + 1, "missing comment line"))?;
        if i + 2 + n > lines.len() {
            return Err(err(lineno, format!("expected {n} atom rows")));
        }
        frames.push(parse_frame(comment, &lines[i + 2..i + 2 + n], lineno + 1)?);
        i += 2 + n;
    }
    Ok(frames)
}

fn parse_frame(comment: &str, rows: &[&str], comment_line: usize) -> Result<Structure> {
    let mut cell = None;
    let mut pbc = None;
    let mut energy = None;
    let mut props = None;
    let mut info = Vec::new();
    for (key, value, raw) in split_comment(comment, comment_line)? {
        match key.as_str() {
            "Lattice" => {
                let v: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| parse_f64(t, comment_line))
                    .collect::<Result<_>>()?;
                if v.len() != 9 {
                    return Err(err(comment_line, format!("Lattice needs 9 reals, got {}", v.len())));
                }
                cell = Some(Cell::from_rows([
                    [v[0], v[1], v[2]],
                    [v[3], v[4], v[5]],
                    [v[6], v[7], v[8]],
                ])?);
            }
            "Properties" => props = Some(parse_properties(&value, comment_line)?),
            "energy" => energy = Some(parse_f64(&value, comment_line)?),
            "pbc" => {
                let v: Vec<bool> = value
                    .split_whitespace()
                    .map(|t| parse_bool(t, comment_line))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(err(comment_line, "pbc needs 3 logicals"));
                }
                pbc = Some([v[0], v[1], v[2]]);
            }
            _ => info.push((key, raw)),
        }
    }
    let props = props.unwrap_or_else(|| {
        vec![
            Property {
                name: "species".into(),
                kind: 'S',
                columns: 1,
            },
            Property {
                name: "pos".into(),
                kind: 'R',
                columns: 3,
            },
        ]
    });
    let width: usize = props.iter().map(|p| p.columns).sum();
    let n = rows.len();
    let mut z = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    let mut forces: Option<Vec<Vec3>> = None;
    let mut arrays: Vec<AtomArray> = Vec::new();
    let mut seen_species = false;
    let mut seen_pos = false;
    for (r, row) in rows.iter().enumerate() {
        let lineno = comment_line + 1 + r;
        let toks: Vec<&str> = row.split_whitespace().collect();
        if toks.len() != width {
            return Err(err(
                lineno,
                format!("{} columns, Properties declare {width}", toks.len()),
            ));
        }
        let mut col = 0;
        for (pi, p) in props.iter().enumerate() {
            let t = &toks[col..col + p.columns];
            col += p.columns;
            match (p.name.as_str(), p.kind, p.columns) {
                ("species", 'S', 1) => {
                    seen_species = true;
                    let zi = elements::atomic_number(t[0])
                        .ok_or_else(|| err(lineno, format!("unknown element {:?}", t[0])))?;
                    z.push(zi);
                }
                ("pos", 'R', 3) => {
                    seen_pos = true;
                    pos.push(Vec3::new(
                        parse_f64(t[0], lineno)?,
                        parse_f64(t[1], lineno)?,
                        parse_f64(t[2], lineno)?,
                    ));
                }
                ("forces", 'R', 3) => {
                    let f = Vec3::new(
                        parse_f64(t[0], lineno)?,
                        parse_f64(t[1], lineno)?,
                        parse_f64(t[2], lineno)?,
                    );
                    forces.get_or_insert_with(|| Vec::with_capacity(n)).push(f);
                }
                _ => {
                    for tok in t {
                        match p.kind {
                            'R' => {
                                parse_f64(tok, lineno)?;
                            }
                            'I' => {
                                tok.parse::<i64>()
                                    .map_err(|_| err(lineno, format!("invalid integer {tok:?}")))?;
                            }
                            'L' => {
                                parse_bool(tok, lineno)?;
                            }
                            _ => {}
                        }
                    }
                    if r == 0 {
                        arrays.push(AtomArray {
                            name: p.name.clone(),
                            kind: p.kind,
                            columns: p.columns,
                            values: Vec::with_capacity(n * p.columns),
                        });
                    }
                    let k = props[..pi]
                        .iter()
                        .filter(|q| !is_core(q))
                        .count();
                    arrays[k].values.extend(t.iter().map(|s| s.to_string()));
                }
            }
        }
    }
    if !seen_species || !seen_pos {
        return Err(err(comment_line, "Properties must include species:S:1 and pos:R:3"));
    }
    let pbc = pbc.unwrap_or(if cell.is_some() { [true; 3] } else { [false; 3] });
    let mut s = Structure::new(z, pos, cell, pbc)?;
    s.energy = energy;
    s.forces = forces;
    s.info = info;
    s.arrays = arrays;
    Ok(s)
}

fn is_core(p: &Property) -> bool {
    matches!(
        (p.name.as_str(), p.kind, p.columns),
        ("species", 'S', 1) | ("pos", 'R', 3) | ("forces", 'R', 3)
    )
}

fn float(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

fn write_frame(out: &mut String, s: &Structure) -> Result<()> {
    let _ = writeln!(out, "{}", s.len());
    if let Some(c) = &s.cell {
        out.push_str("Lattice=\"");
        for (k, v) in c.rows().iter().flatten().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            float(out, *v);
        }
        out.push_str("\" ");
    }
    out.push_str("Properties=species:S:1:pos:R:3");
    if s.forces.is_some() {
        out.push_str(":forces:R:3");
    }
    for a in &s.arrays {
        let _ = write!(out, ":{}:{}:{}", a.name, a.kind, a.columns);
    }
    if let Some(e) = s.energy {
        out.push_str(" energy=");
        float(out, e);
    }
    let flag = |b: bool| if b { 'T' } else { 'F' };
    let _ = write!(
        out,
        " pbc=\"{} {} {}\"",
        flag(s.pbc[0]),
        flag(s.pbc[1]),
        flag(s.pbc[2])
    );
    for (k, v) in &s.info {
        let _ = write!(out, " {k}={v}");
    }
    out.push('\n');
    for i in 0..s.len() {
        let z = s.atomic_numbers[i];
        let sym = elements::symbol(z).ok_or(IoError::UnknownElement(z))?;
        out.push_str(sym);
        let mut vec = |v: &Vec3| {
            for c in v.iter() {
                out.push(' ');
                float(out, *c);
            }
        };
        vec(&s.positions[i]);
        if let Some(f) = &s.forces {
            vec(&f[i]);
        }
        for a in &s.arrays {
            if a.values.len() != a.columns * s.len() {
                return Err(IoError::Invalid(format!(
                    "array {} has {} values for {} atoms",
                    a.name,
                    a.values.len(),
                    s.len()
                )));
            }
            for v in &a.values[i * a.columns..(i + 1) * a.columns] {
                out.push(' ');
                out.push_str(v);
            }
        }
        out.push('\n');
    }
    Ok(())
}

pub fn write_extxyz<'a>(frames: impl IntoIterator<Item = &'a Structure>) -> Result<String> {
    let mut out = String::new();
    for s in frames {
        write_frame(&mut out, s)?;
    }
    Ok(out)
}

pub fn read_extxyz_file(path: &std::path::Path) -> Result<Vec<Structure>> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_extxyz(&text)
}

pub fn write_extxyz_file<'a>(
    path: &std::path::Path,
    frames: impl IntoIterator<Item = &'a Structure>,
) -> Result<()> {
    let text = write_extxyz(frames)?;
    std::fs::write(path, text).map_err(|e| IoError::File {
        path: path.display().to_string(),
        source: e,
    })
}
