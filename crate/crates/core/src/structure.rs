//! Single-chain protein records and the fixed-column PDB subset.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::Point;
use crate::residues::{element_number, element_symbol, AaType};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residue {
    pub residue_index: i32,
    pub aa: AaType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub name: String,
    pub element: u8,
    pub charge: i8,
    pub residue_index: i32,
    pub position: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProteinRecord {
    pub chain_id: String,
    pub sequence: Vec<AaType>,
    pub residues: Vec<Residue>,
    pub atoms: Vec<Atom>,
}

impl ProteinRecord {
    /// Validates ordering: residue indices strictly increase and every atom
    /// belongs to a listed residue, grouped contiguously in residue order.
    pub fn new(chain_id: String, residues: Vec<Residue>, atoms: Vec<Atom>) -> Result<Self> {
        if residues.is_empty() {
            return Err(CoreError::EmptyStructure);
        }
        for w in residues.windows(2) {
            if w[1].residue_index <= w[0].residue_index {
                return Err(CoreError::Invalid(format!(
                    "residue index {} follows {}",
                    w[1].residue_index, w[0].residue_index
                )));
            }
        }
        let mut cursor = 0;
        for (i, a) in atoms.iter().enumerate() {
            while cursor < residues.len() && residues[cursor].residue_index < a.residue_index {
                cursor += 1;
            }
            if cursor == residues.len() || residues[cursor].residue_index != a.residue_index {
                return Err(CoreError::Invalid(format!(
                    "atom {i} ({}) references residue {} out of order or missing",
                    a.name, a.residue_index
                )));
            }
        }
        let sequence = residues.iter().map(|r| r.aa).collect();
        Ok(Self {
            chain_id,
            sequence,
            residues,
            atoms,
        })
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn positions(&self) -> Vec<Point> {
        self.atoms.iter().map(|a| a.position).collect()
    }

    /// Position of each atom's residue within `residues`.
    pub fn atom_residue_slots(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.atoms.len());
        let mut slot = 0;
        for a in &self.atoms {
            while self.residues[slot].residue_index != a.residue_index {
                slot += 1;
            }
            out.push(slot);
        }
        out
    }

    pub fn with_positions(&self, coords: &[Point]) -> Result<Self> {
        if coords.len() != self.atoms.len() {
            return Err(CoreError::Shape(format!(
                "{} coordinates for {} atoms",
                coords.len(),
                self.atoms.len()
            )));
        }
        let mut out = self.clone();
        for (a, p) in out.atoms.iter_mut().zip(coords) {
            a.position = *p;
        }
        Ok(out)
    }
}

fn field(line: &str, start: usize, end: usize) -> &str {
    let end = end.min(line.len());
    if start >= end {
        ""
    } else {
        line.get(start..end).unwrap_or("")
    }
}

fn parse_num<T: std::str::FromStr>(line: &str, lineno: usize, start: usize, end: usize, what: &str) -> Result<T> {
    let s = field(line, start, end).trim();
    s.parse().map_err(|_| CoreError::Parse {
        line: lineno,
        msg: format!("bad {what} {s:?}"),
    })
}

fn parse_charge(s: &str) -> i8 {
    let s = s.trim();
    let bytes = s.as_bytes();
    match bytes {
        [d, b'+'] if d.is_ascii_digit() => (d - b'0') as i8,
        [d, b'-'] if d.is_ascii_digit() => -((d - b'0') as i8),
        _ => 0,
    }
}

/// Parses ATOM records of the first chain of the first model. Hydrogens,
/// HETATM records and non-primary alternate locations are dropped.
pub fn parse_pdb(text: &str) -> Result<ProteinRecord> {
    let mut chain: Option<char> = None;
    let mut primary_alt: Option<char> = None;
    let mut residues: Vec<Residue> = Vec::new();
    let mut atoms: Vec<Atom> = Vec::new();
    let mut current: Option<(i32, char, String)> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        if line.len() < 54 {
            return Err(CoreError::Parse {
                line: lineno,
                msg: format!("ATOM record has {} columns, need 54", line.len()),
            });
        }
        let name = field(line, 12, 16).trim().to_string();
        let alt = field(line, 16, 17).chars().next().unwrap_or(' ');
        let resname = field(line, 17, 20).trim().to_string();
        let chain_id = field(line, 21, 22).chars().next().unwrap_or(' ');
        let resseq: i32 = parse_num(line, lineno, 22, 26, "residue number")?;
        let icode = field(line, 26, 27).chars().next().unwrap_or(' ');
        let x: f64 = parse_num(line, lineno, 30, 38, "x coordinate")?;
        let y: f64 = parse_num(line, lineno, 38, 46, "y coordinate")?;
        let z: f64 = parse_num(line, lineno, 46, 54, "z coordinate")?;
        if name.is_empty() {
            return Err(CoreError::Parse {
                line: lineno,
                msg: "empty atom name".into(),
            });
        }
        let elem_field = field(line, 76, 78).trim();
        let symbol = if elem_field.is_empty() {
            name.trim_start_matches(|c: char| c.is_ascii_digit())
                .chars()
                .next()
                .map(String::from)
                .unwrap_or_default()
        } else {
            elem_field.to_string()
        };
        if matches!(symbol.to_ascii_uppercase().as_str(), "H" | "D") {
            continue;
        }
        let element = element_number(&symbol).ok_or_else(|| CoreError::Parse {
            line: lineno,
            msg: format!("unsupported element {symbol:?}"),
        })?;
        match chain {
            None => chain = Some(chain_id),
            Some(c) if c != chain_id => continue,
            _ => {}
        }
        if alt != ' ' {
            match primary_alt {
                None => primary_alt = Some(alt),
                Some(p) if p != alt => continue,
                _ => {}
            }
        }
        let key = (resseq, icode, resname.clone());
        if current.as_ref() != Some(&key) {
            if let Some(last) = residues.last() {
                if resseq <= last.residue_index {
                    return Err(CoreError::Parse {
                        line: lineno,
                        msg: format!("residue number {resseq} does not increase"),
                    });
                }
            }
            residues.push(Residue {
                residue_index: resseq,
                aa: AaType::from_code3(&resname),
            });
            current = Some(key);
        }
        if atoms.iter().rev().take_while(|a| a.residue_index == resseq).any(|a| a.name == name) {
            continue;
        }
        atoms.push(Atom {
            name,
            element,
            charge: parse_charge(field(line, 78, 80)),
            residue_index: resseq,
            position: [x, y, z],
        });
    }
    let chain_id = chain.map(|c| c.to_string()).unwrap_or_default();
    ProteinRecord::new(chain_id.trim().to_string(), residues, atoms)
}

fn atom_name_field(name: &str, element: u8) -> String {
    if name.len() < 4 && element_symbol(element).len() == 1 {
        format!(" {name:<3}")
    } else {
        format!("{name:<4}")
    }
}

fn charge_field(c: i8) -> String {
    match c {
        0 => "  ".into(),
        c if c > 0 => format!("{c}+"),
        c => format!("{}-", -c),
    }
}

/// Writes ATOM records with `coords` replacing the stored positions. Per-residue
/// `bfactor` values are broadcast to every atom of the residue.
pub fn write_pdb(rec: &ProteinRecord, coords: &[Point], bfactor: Option<&[f64]>) -> Result<String> {
    if coords.len() != rec.atoms.len() {
        return Err(CoreError::Shape(format!(
            "{} coordinates for {} atoms",
            coords.len(),
            rec.atoms.len()
        )));
    }
    if let Some(b) = bfactor {
        if b.len() != rec.residues.len() {
            return Err(CoreError::Shape(format!(
                "{} B-factors for {} residues",
                b.len(),
                rec.residues.len()
            )));
        }
    }
    let slots = rec.atom_residue_slots();
    let chain = rec.chain_id.chars().next().unwrap_or('A');
    let mut out = String::new();
    for (i, (a, p)) in rec.atoms.iter().zip(coords).enumerate() {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite(i));
        }
        if p.iter().any(|v| v.abs() >= 1e4) {
            return Err(CoreError::Invalid(format!("coordinate of atom {i} exceeds the PDB field width")));
        }
        let res = &rec.residues[slots[i]];
        let b = bfactor.map_or(0.0, |b| b[slots[i]]);
        out.push_str(&format!(
            "ATOM  {:>5} {}{}{:>3} {}{:>4}    {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}          {:>2}{}\n",
            (i + 1) % 100_000,
            atom_name_field(&a.name, a.element),
            ' ',
            res.aa.code3(),
            chain,
            res.residue_index,
            p[0],
            p[1],
            p[2],
            1.0,
            b,
            element_symbol(a.element),
            charge_field(a.charge),
        ));
    }
    out.push_str("TER\nEND\n");
    Ok(out)
}
