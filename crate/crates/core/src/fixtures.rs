//! Small synthetic proteins built from backbone dihedrals, used by tests,
//! the acceptance suite and CLI demos.

use crate::error::Result;
use crate::residues::{build_chain, parse_sequence, Dihedrals};
use crate::structure::ProteinRecord;

const TURN_A: Dihedrals = Dihedrals { phi: 60.0, psi: 30.0, omega: 180.0 };
const TURN_B: Dihedrals = Dihedrals { phi: 90.0, psi: 0.0, omega: 180.0 };
const LOOP: Dihedrals = Dihedrals { phi: -80.0, psi: 150.0, omega: 180.0 };

/// Secondary-structure string to dihedrals: `H` helix, `E` strand, `T`/`U`
/// the two positions of a tight turn, anything else a polyproline-like loop.
pub fn dihedrals_from_ss(ss: &str) -> Vec<Dihedrals> {
    ss.chars()
        .map(|c| match c {
            'H' => Dihedrals::HELIX,
            'E' => Dihedrals::STRAND,
            'T' => TURN_A,
            'U' => TURN_B,
            _ => LOOP,
        })
        .collect()
}

/// Name, sequence and secondary-structure layout of the toy set.
pub const TOY_SET: [(&str, &str, &str); 5] = [
    ("hairpin16", "KTWTVEGNGKKYTVEV", "LEEEEETULEEEEEEL"),
    ("helix18", "SPEELLKKALELAKKLGA", "LHHHHHHHHHHHHHHHHL"),
    ("hth20", "MDELIKKAAELLGNPEEVIR", "LHHHHHHHHLLLLLHHHHHL"),
    ("mixed22", "GSKVEVRIDGNTPEEAIKLLKE", "LEEEEEELLLLHHHHHHHHHHL"),
    ("loop24", "MSPDKGYTLEWFAKRAAEKGLSPE", "LLLHHHHHHHLLLEEEEEEELLLL"),
];

pub fn toy_protein(sequence: &str, ss: &str) -> Result<ProteinRecord> {
    let seq = parse_sequence(sequence)?;
    build_chain(&seq, &dihedrals_from_ss(ss), 'A')
}

pub fn toy_set() -> Result<Vec<(String, ProteinRecord)>> {
    TOY_SET
        .iter()
        .map(|&(n, s, ss)| Ok((n.to_string(), toy_protein(s, ss)?)))
        .collect()
}
