//! Amino-acid vocabulary, idealized residue geometry and a chain builder.
//!
//! Heavy-atom geometry is stored as internal coordinates (bond, angle,
//! torsion against three previously placed atoms) and placed with NeRF.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{center, Point};
use crate::structure::{Atom, ProteinRecord, Residue};

pub const NUM_RESTYPES: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AaType {
    Ala,
    Arg,
    Asn,
    Asp,
    Cys,
    Gln,
    Glu,
    Gly,
    His,
    Ile,
    Leu,
    Lys,
    Met,
    Phe,
    Pro,
    Ser,
    Thr,
    Trp,
    Tyr,
    Val,
    Unk,
}

const THREE: [&str; NUM_RESTYPES] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET",
    "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL", "UNK",
];
const ONE: &[u8; NUM_RESTYPES] = b"ARNDCQEGHILKMFPSTWYVX";

impl AaType {
    pub const ALL: [AaType; NUM_RESTYPES] = [
        AaType::Ala,
        AaType::Arg,
        AaType::Asn,
        AaType::Asp,
        AaType::Cys,
        AaType::Gln,
        AaType::Glu,
        AaType::Gly,
        AaType::His,
        AaType::Ile,
        AaType::Leu,
        AaType::Lys,
        AaType::Met,
        AaType::Phe,
        AaType::Pro,
        AaType::Ser,
        AaType::Thr,
        AaType::Trp,
        AaType::Tyr,
        AaType::Val,
        AaType::Unk,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code3(self) -> &'static str {
        THREE[self.index()]
    }

    pub fn code1(self) -> char {
        ONE[self.index()] as char
    }

    /// Three-letter lookup; anything unrecognized is [`AaType::Unk`].
    pub fn from_code3(code: &str) -> AaType {
        let code = code.trim().to_ascii_uppercase();
        THREE
            .iter()
            .position(|&c| c == code)
            .map_or(AaType::Unk, |i| AaType::ALL[i])
    }

    pub fn from_code1(c: char) -> Option<AaType> {
        let c = c.to_ascii_uppercase() as u8;
        ONE.iter().position(|&o| o == c).map(|i| AaType::ALL[i])
    }

    pub fn is_standard_code3(code: &str) -> bool {
        let code = code.trim().to_ascii_uppercase();
        THREE[..20].contains(&code.as_str())
    }
}

pub fn parse_sequence(seq: &str) -> Result<Vec<AaType>> {
    seq.chars()
        .filter(|c| !c.is_whitespace())
        .enumerate()
        .map(|(i, c)| {
            AaType::from_code1(c)
                .ok_or_else(|| CoreError::Invalid(format!("unsupported residue '{c}' at position {}", i + 1)))
        })
        .collect()
}

pub fn sequence_string(seq: &[AaType]) -> String {
    seq.iter().map(|a| a.code1()).collect()
}

pub fn element_number(symbol: &str) -> Option<u8> {
    Some(match symbol.trim().to_ascii_uppercase().as_str() {
        "H" => 1,
        "C" => 6,
        "N" => 7,
        "O" => 8,
        "S" => 16,
        "SE" => 34,
        _ => return None,
    })
}

pub fn element_symbol(z: u8) -> &'static str {
    match z {
        1 => "H",
        6 => "C",
        7 => "N",
        8 => "O",
        16 => "S",
        34 => "SE",
        _ => "X",
    }
}

/// One side-chain atom: placed bonded to `refs[2]`, with the angle at
/// `refs[2]` and the torsion `refs[0]-refs[1]-refs[2]-atom`.
struct ZAtom {
    name: &'static str,
    refs: [&'static str; 3],
    bond: f64,
    angle: f64,
    torsion: f64,
}

const fn z(name: &'static str, refs: [&'static str; 3], bond: f64, angle: f64, torsion: f64) -> ZAtom {
    ZAtom {
        name,
        refs,
        bond,
        angle,
        torsion,
    }
}

const CB: ZAtom = z("CB", ["C", "N", "CA"], 1.53, 110.4, -122.6);
const NCAC: [&str; 3] = ["N", "CA", "CB"];
const CACB: [&str; 3] = ["CA", "CB", "CG"];

fn side_chain(aa: AaType) -> Vec<ZAtom> {
    use AaType::*;
    let mut atoms = match aa {
        Gly | Unk => return Vec::new(),
        Ala => vec![],
        Arg => vec![
            z("CG", NCAC, 1.52, 113.8, -60.0),
            z("CD", CACB, 1.52, 111.8, 180.0),
            z("NE", ["CB", "CG", "CD"], 1.46, 112.0, 180.0),
            z("CZ", ["CG", "CD", "NE"], 1.33, 124.5, 180.0),
            z("NH1", ["CD", "NE", "CZ"], 1.33, 120.0, 0.0),
            z("NH2", ["CD", "NE", "CZ"], 1.33, 120.0, 180.0),
        ],
        Asn => vec![
            z("CG", NCAC, 1.52, 112.6, -60.0),
            z("OD1", CACB, 1.23, 120.8, -60.0),
            z("ND2", CACB, 1.33, 116.4, 120.0),
        ],
        Asp => vec![
            z("CG", NCAC, 1.52, 112.6, -60.0),
            z("OD1", CACB, 1.25, 118.4, -60.0),
            z("OD2", CACB, 1.25, 118.4, 120.0),
        ],
        Cys => vec![z("SG", NCAC, 1.81, 114.0, -60.0)],
        Gln => vec![
            z("CG", NCAC, 1.52, 114.0, -60.0),
            z("CD", CACB, 1.52, 112.6, 180.0),
            z("OE1", ["CB", "CG", "CD"], 1.23, 120.8, -60.0),
            z("NE2", ["CB", "CG", "CD"], 1.33, 116.4, 120.0),
        ],
        Glu => vec![
            z("CG", NCAC, 1.52, 114.0, -60.0),
            z("CD", CACB, 1.52, 112.6, 180.0),
            z("OE1", ["CB", "CG", "CD"], 1.25, 118.4, -60.0),
            z("OE2", ["CB", "CG", "CD"], 1.25, 118.4, 120.0),
        ],
        His => vec![
            z("CG", NCAC, 1.50, 113.7, -60.0),
            z("ND1", CACB, 1.38, 122.7, 90.0),
            z("CD2", CACB, 1.36, 131.0, -90.0),
            z("CE1", ["CB", "CG", "ND1"], 1.32, 109.0, 180.0),
            z("NE2", ["CB", "CG", "CD2"], 1.37, 107.0, 180.0),
        ],
        Ile => vec![
            z("CG1", NCAC, 1.53, 110.4, -60.0),
            z("CG2", NCAC, 1.53, 110.5, 180.0),
            z("CD1", ["CA", "CB", "CG1"], 1.52, 113.8, 170.0),
        ],
        Leu => vec![
            z("CG", NCAC, 1.53, 116.3, -60.0),
            z("CD1", CACB, 1.52, 110.5, 180.0),
            z("CD2", CACB, 1.52, 110.5, 60.0),
        ],
        Lys => vec![
            z("CG", NCAC, 1.52, 113.8, -60.0),
            z("CD", CACB, 1.52, 111.5, 180.0),
            z("CE", ["CB", "CG", "CD"], 1.52, 111.5, 180.0),
            z("NZ", ["CG", "CD", "CE"], 1.49, 111.7, 180.0),
        ],
        Met => vec![
            z("CG", NCAC, 1.52, 113.7, -60.0),
            z("SD", CACB, 1.81, 112.7, 180.0),
            z("CE", ["CB", "CG", "SD"], 1.79, 100.8, 180.0),
        ],
        Phe => vec![
            z("CG", NCAC, 1.50, 113.8, -60.0),
            z("CD1", CACB, 1.39, 120.7, 90.0),
            z("CD2", CACB, 1.39, 120.7, -90.0),
            z("CE1", ["CB", "CG", "CD1"], 1.39, 120.0, 180.0),
            z("CE2", ["CB", "CG", "CD2"], 1.39, 120.0, 180.0),
            z("CZ", ["CG", "CD1", "CE1"], 1.39, 120.0, 0.0),
        ],
        Pro => vec![
            z("CG", NCAC, 1.50, 104.5, 30.0),
            z("CD", CACB, 1.50, 105.5, -35.0),
        ],
        Ser => vec![z("OG", NCAC, 1.42, 111.1, -60.0)],
        Thr => vec![
            z("OG1", NCAC, 1.43, 109.2, -60.0),
            z("CG2", NCAC, 1.53, 111.1, 180.0),
        ],
        Trp => vec![
            z("CG", NCAC, 1.50, 114.1, -60.0),
            z("CD1", CACB, 1.37, 127.1, 90.0),
            z("CD2", CACB, 1.43, 126.6, -90.0),
            z("NE1", ["CB", "CG", "CD1"], 1.38, 110.2, 180.0),
            z("CE2", ["CB", "CG", "CD2"], 1.40, 107.2, 180.0),
            z("CE3", ["CB", "CG", "CD2"], 1.40, 133.9, 0.0),
            z("CZ2", ["CG", "CD2", "CE2"], 1.40, 122.4, 180.0),
            z("CZ3", ["CG", "CD2", "CE3"], 1.39, 118.7, 180.0),
            z("CH2", ["CD2", "CE2", "CZ2"], 1.37, 117.5, 0.0),
        ],
        Tyr => vec![
            z("CG", NCAC, 1.51, 113.8, -60.0),
            z("CD1", CACB, 1.39, 120.8, 90.0),
            z("CD2", CACB, 1.39, 120.8, -90.0),
            z("CE1", ["CB", "CG", "CD1"], 1.39, 120.0, 180.0),
            z("CE2", ["CB", "CG", "CD2"], 1.39, 120.0, 180.0),
            z("CZ", ["CG", "CD1", "CE1"], 1.39, 120.0, 0.0),
            z("OH", ["CD1", "CE1", "CZ"], 1.36, 119.8, 180.0),
        ],
        Val => vec![
            z("CG1", NCAC, 1.53, 110.7, 180.0),
            z("CG2", NCAC, 1.53, 110.4, -60.0),
        ],
    };
    atoms.insert(0, CB);
    atoms
}

fn formal_charge(aa: AaType, name: &str) -> i8 {
    match (aa, name) {
        (AaType::Lys, "NZ") | (AaType::Arg, "NH2") => 1,
        (AaType::Asp, "OD2") | (AaType::Glu, "OE2") => -1,
        _ => 0,
    }
}

/// NeRF: place `d` given `a, b, c`, `|cd|`, angle `bcd` and torsion `abcd` (degrees).
pub fn place(a: &Point, b: &Point, c: &Point, bond: f64, angle: f64, torsion: f64) -> Point {
    let sub = |u: &Point, v: &Point| [u[0] - v[0], u[1] - v[1], u[2] - v[2]];
    let cross = |u: [f64; 3], v: [f64; 3]| {
        [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ]
    };
    let unit = |u: [f64; 3]| {
        let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        u.map(|x| x / n)
    };
    let bc = unit(sub(c, b));
    let n = unit(cross(sub(b, a), bc));
    let m = cross(n, bc);
    let (ang, tor) = (angle.to_radians(), torsion.to_radians());
    let d2 = [
        -bond * ang.cos(),
        bond * ang.sin() * tor.cos(),
        bond * ang.sin() * tor.sin(),
    ];
    std::array::from_fn(|k| c[k] + d2[0] * bc[k] + d2[1] * m[k] + d2[2] * n[k])
}

const N_CA: f64 = 1.458;
const CA_C: f64 = 1.525;
const C_O: f64 = 1.231;
const C_N: f64 = 1.329;
const ANG_N_CA_C: f64 = 111.2;
const ANG_CA_C_N: f64 = 116.2;
const ANG_C_N_CA: f64 = 121.7;
const ANG_CA_C_O: f64 = 120.5;

fn backbone_seed() -> [Point; 3] {
    let n = [0.0, 0.0, 0.0];
    let ca = [N_CA, 0.0, 0.0];
    let ang = ANG_N_CA_C.to_radians();
    let c = [N_CA - CA_C * ang.cos(), CA_C * ang.sin(), 0.0];
    [n, ca, c]
}

/// Places side-chain atoms onto an existing backbone `N, CA, C` (and `O`).
fn complete_residue(aa: AaType, backbone: &[(String, Point)]) -> Vec<(String, Point)> {
    let mut placed: Vec<(String, Point)> = backbone.to_vec();
    for za in side_chain(aa) {
        let get = |name: &str| {
            placed
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, p)| *p)
                .expect("reference atom placed earlier")
        };
        let p = place(&get(za.refs[0]), &get(za.refs[1]), &get(za.refs[2]), za.bond, za.angle, za.torsion);
        placed.push((za.name.to_string(), p));
    }
    placed
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateAtom {
    pub name: String,
    pub element: u8,
    pub charge: i8,
    pub position: Point,
}

/// Idealized heavy-atom geometry for every residue type, mean-centered.
#[derive(Clone, Debug, PartialEq)]
pub struct ConformerTable {
    templates: Vec<Vec<TemplateAtom>>,
}

impl Default for ConformerTable {
    fn default() -> Self {
        Self::standard()
    }
}

impl ConformerTable {
    pub fn standard() -> Self {
        let [n, ca, c] = backbone_seed();
        let o = place(&n, &ca, &c, C_O, ANG_CA_C_O, 180.0);
        let bb = vec![
            ("N".to_string(), n),
            ("CA".to_string(), ca),
            ("C".to_string(), c),
            ("O".to_string(), o),
        ];
        let templates = AaType::ALL
            .iter()
            .map(|&aa| {
                let atoms = complete_residue(aa, &bb);
                let pos: Vec<Point> = atoms.iter().map(|(_, p)| *p).collect();
                let centered = center(&pos);
                atoms
                    .into_iter()
                    .zip(centered)
                    .map(|((name, _), position)| TemplateAtom {
                        element: element_number(&name[..1]).expect("template element"),
                        charge: formal_charge(aa, &name),
                        name,
                        position,
                    })
                    .collect()
            })
            .collect();
        Self { templates }
    }

    pub fn atoms(&self, aa: AaType) -> &[TemplateAtom] {
        &self.templates[aa.index()]
    }

    pub fn atom_count(&self, aa: AaType) -> usize {
        self.templates[aa.index()].len()
    }

    pub fn atom_index(&self, aa: AaType, name: &str) -> Option<usize> {
        self.atoms(aa).iter().position(|a| a.name == name)
    }
}

/// Backbone dihedrals `(φ, ψ, ω)` in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dihedrals {
    pub phi: f64,
    pub psi: f64,
    pub omega: f64,
}

impl Dihedrals {
    pub const HELIX: Dihedrals = Dihedrals {
        phi: -57.0,
        psi: -47.0,
        omega: 180.0,
    };
    pub const STRAND: Dihedrals = Dihedrals {
        phi: -120.0,
        psi: 130.0,
        omega: 180.0,
    };

    pub fn new(phi: f64, psi: f64) -> Self {
        Self {
            phi,
            psi,
            omega: 180.0,
        }
    }
}

/// Builds an idealized single-chain protein from a sequence and per-residue
/// backbone dihedrals; the first `φ` and the last `ψ, ω` only orient atoms
/// that have no neighbor and are ignored.
pub fn build_chain(seq: &[AaType], dihedrals: &[Dihedrals], chain_id: char) -> Result<ProteinRecord> {
    if seq.is_empty() {
        return Err(CoreError::EmptyStructure);
    }
    if seq.len() != dihedrals.len() {
        return Err(CoreError::Shape(format!(
            "{} residues but {} dihedral triples",
            seq.len(),
            dihedrals.len()
        )));
    }
    let [mut n, mut ca, mut c] = backbone_seed();
    let mut atoms = Vec::new();
    let mut residues = Vec::new();
    for (i, (&aa, d)) in seq.iter().zip(dihedrals).enumerate() {
        if i > 0 {
            let prev = (n, ca, c);
            n = place(&prev.0, &prev.1, &prev.2, C_N, ANG_CA_C_N, dihedrals[i - 1].psi);
            ca = place(&prev.1, &prev.2, &n, N_CA, ANG_C_N_CA, dihedrals[i - 1].omega);
            c = place(&prev.2, &n, &ca, CA_C, ANG_N_CA_C, d.phi);
        }
        let o = place(&n, &ca, &c, C_O, ANG_CA_C_O, d.psi + 180.0);
        let bb = vec![
            ("N".to_string(), n),
            ("CA".to_string(), ca),
            ("C".to_string(), c),
            ("O".to_string(), o),
        ];
        let residue_index = i as i32 + 1;
        residues.push(Residue { residue_index, aa });
        for (name, position) in complete_residue(aa, &bb) {
            atoms.push(Atom {
                element: element_number(&name[..1]).expect("element"),
                charge: formal_charge(aa, &name),
                name,
                residue_index,
                position,
            });
        }
    }
    ProteinRecord::new(chain_id.to_string(), residues, atoms)
}
