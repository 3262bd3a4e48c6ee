//! Model input features and cropping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{CoreError, Result};
use crate::geometry::{center, distance, Point};
use crate::residues::{AaType, ConformerTable, NUM_RESTYPES};
use crate::structure::{Atom, ProteinRecord, Residue};

/// Coordinates are divided by this before entering the flow.
pub const COORD_SCALE: f64 = 16.0;
/// Reference conformer scaling.
pub const REF_SCALE: f64 = 0.2;
pub const ELEMENT_CLASSES: usize = 128;
pub const NAME_CHARS: usize = 4;
pub const NAME_CHAR_CLASSES: usize = 64;
pub const MAX_CROP_NEIGHBORHOOD: usize = 40;

/// Per-chain inputs. Categorical features are stored as indices; the
/// one-hot views are produced on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub name: String,
    pub chain_id: String,
    pub restype: Vec<AaType>,
    pub residue_index: Vec<i32>,
    pub token_index: Vec<usize>,
    pub esm_embed: Option<Embedding>,
    pub ref_pos: Vec<Point>,
    pub ref_mask: Vec<f32>,
    pub ref_element: Vec<u8>,
    pub ref_charge: Vec<i8>,
    pub ref_atom_name_chars: Vec<[u8; NAME_CHARS]>,
    pub ref_space_uid: Vec<i32>,
    pub atom_to_residue: Vec<usize>,
    pub gt_pos: Option<Vec<Point>>,
}

fn encode_name(name: &str) -> [u8; NAME_CHARS] {
    let mut out = [0u8; NAME_CHARS];
    for (slot, c) in out.iter_mut().zip(name.bytes()) {
        *slot = c.saturating_sub(32).min(NAME_CHAR_CLASSES as u8 - 1);
    }
    out
}

fn decode_name(chars: &[u8; NAME_CHARS]) -> String {
    chars
        .iter()
        .map(|&c| (c + 32) as char)
        .collect::<String>()
        .trim_end()
        .to_string()
}

impl FeatureBundle {
    pub fn n_res(&self) -> usize {
        self.restype.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.atom_to_residue.len()
    }

    pub fn atom_name(&self, i: usize) -> String {
        decode_name(&self.ref_atom_name_chars[i])
    }

    pub fn restype_one_hot(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.n_res() * NUM_RESTYPES];
        for (r, aa) in self.restype.iter().enumerate() {
            out[r * NUM_RESTYPES + aa.index()] = 1.0;
        }
        out
    }

    pub fn ref_element_one_hot(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.n_atoms() * ELEMENT_CLASSES];
        for (i, &z) in self.ref_element.iter().enumerate() {
            out[i * ELEMENT_CLASSES + (z as usize).min(ELEMENT_CLASSES - 1)] = 1.0;
        }
        out
    }

    /// `[N_a, 4 × 64]` flattened one-hot of the padded atom name.
    pub fn ref_atom_name_one_hot(&self) -> Vec<f32> {
        let w = NAME_CHARS * NAME_CHAR_CLASSES;
        let mut out = vec![0.0; self.n_atoms() * w];
        for (i, chars) in self.ref_atom_name_chars.iter().enumerate() {
            for (k, &c) in chars.iter().enumerate() {
                out[i * w + k * NAME_CHAR_CLASSES + c as usize] = 1.0;
            }
        }
        out
    }

    /// Index of each residue's Cα atom, if present.
    pub fn ca_indices(&self) -> Vec<Option<usize>> {
        let ca = encode_name("CA");
        let mut out = vec![None; self.n_res()];
        for (i, (&r, chars)) in self.atom_to_residue.iter().zip(&self.ref_atom_name_chars).enumerate() {
            if *chars == ca && out[r].is_none() {
                out[r] = Some(i);
            }
        }
        out
    }

    /// Ground truth in Å.
    pub fn gt_angstrom(&self) -> Option<Vec<Point>> {
        self.gt_pos
            .as_ref()
            .map(|g| g.iter().map(|p| p.map(|v| v * COORD_SCALE)).collect())
    }

    /// Record for writing coordinates (Å) with this bundle's atoms.
    pub fn to_record(&self, coords: &[Point]) -> Result<ProteinRecord> {
        if coords.len() != self.n_atoms() {
            return Err(CoreError::Shape(format!(
                "{} coordinates for {} atoms",
                coords.len(),
                self.n_atoms()
            )));
        }
        let residues = self
            .restype
            .iter()
            .zip(&self.residue_index)
            .map(|(&aa, &residue_index)| Residue { residue_index, aa })
            .collect();
        let atoms = (0..self.n_atoms())
            .map(|i| Atom {
                name: self.atom_name(i),
                element: self.ref_element[i],
                charge: self.ref_charge[i],
                residue_index: self.residue_index[self.atom_to_residue[i]],
                position: coords[i],
            })
            .collect();
        ProteinRecord::new(self.chain_id.clone(), residues, atoms)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.n_res();
        let na = self.n_atoms();
        let bad = |what: &str| Err(CoreError::Shape(format!("{what} length mismatch")));
        if self.residue_index.len() != n || self.token_index.len() != n {
            return bad("residue feature");
        }
        if [
            self.ref_pos.len(),
            self.ref_mask.len(),
            self.ref_element.len(),
            self.ref_charge.len(),
            self.ref_atom_name_chars.len(),
            self.ref_space_uid.len(),
        ]
        .iter()
        .any(|&l| l != na)
        {
            return bad("atom feature");
        }
        if let Some(g) = &self.gt_pos {
            if g.len() != na {
                return bad("gt_pos");
            }
        }
        if let Some(e) = &self.esm_embed {
            if e.n_res != n {
                return Err(CoreError::Shape(format!("embedding has {} rows for {n} residues", e.n_res)));
            }
        }
        let mut owned = vec![false; n];
        for w in self.atom_to_residue.windows(2) {
            if w[1] < w[0] {
                return Err(CoreError::Invalid("atoms not grouped by residue".into()));
            }
        }
        for &r in &self.atom_to_residue {
            if r >= n {
                return Err(CoreError::Invalid(format!("atom maps to residue {r} of {n}")));
            }
            owned[r] = true;
        }
        if let Some(r) = owned.iter().position(|o| !o) {
            return Err(CoreError::Invalid(format!("residue {r} owns no atoms")));
        }
        Ok(())
    }
}

fn attach_embedding(n_res: usize, emb: Option<Embedding>) -> Result<Option<Embedding>> {
    match emb {
        Some(e) if e.n_res != n_res => Err(CoreError::Shape(format!(
            "embedding has {} rows, chain has {n_res} residues",
            e.n_res
        ))),
        e => Ok(e),
    }
}

/// Features for a sequence without known coordinates.
pub fn featurize_sequence(
    name: &str,
    seq: &[AaType],
    table: &ConformerTable,
    embeddings: Option<Embedding>,
) -> Result<FeatureBundle> {
    if seq.is_empty() {
        return Err(CoreError::EmptyStructure);
    }
    let residue_index: Vec<i32> = (1..=seq.len() as i32).collect();
    let mut b = skeleton(name, "A", seq, &residue_index, table);
    b.esm_embed = attach_embedding(seq.len(), embeddings)?;
    b.check()?;
    Ok(b)
}

fn skeleton(
    name: &str,
    chain_id: &str,
    seq: &[AaType],
    residue_index: &[i32],
    table: &ConformerTable,
) -> FeatureBundle {
    let mut b = FeatureBundle {
        name: name.to_string(),
        chain_id: chain_id.to_string(),
        restype: seq.to_vec(),
        residue_index: residue_index.to_vec(),
        token_index: (0..seq.len()).collect(),
        esm_embed: None,
        ref_pos: Vec::new(),
        ref_mask: Vec::new(),
        ref_element: Vec::new(),
        ref_charge: Vec::new(),
        ref_atom_name_chars: Vec::new(),
        ref_space_uid: Vec::new(),
        atom_to_residue: Vec::new(),
        gt_pos: None,
    };
    for (r, &aa) in seq.iter().enumerate() {
        for a in table.atoms(aa) {
            b.ref_pos.push(a.position.map(|v| v * REF_SCALE));
            b.ref_mask.push(1.0);
            b.ref_element.push(a.element);
            b.ref_charge.push(a.charge);
            b.ref_atom_name_chars.push(encode_name(&a.name));
            b.ref_space_uid.push(residue_index[r]);
            b.atom_to_residue.push(r);
        }
    }
    b
}

/// Features for a parsed chain. Atoms are reordered to template order; atoms
/// outside the template are dropped and a missing template atom is an error.
pub fn featurize(
    name: &str,
    rec: &ProteinRecord,
    table: &ConformerTable,
    embeddings: Option<Embedding>,
) -> Result<FeatureBundle> {
    let residue_index: Vec<i32> = rec.residues.iter().map(|r| r.residue_index).collect();
    let mut b = skeleton(name, &rec.chain_id, &rec.sequence, &residue_index, table);
    b.esm_embed = attach_embedding(rec.len(), embeddings)?;
    let slots = rec.atom_residue_slots();
    let mut by_residue: Vec<Vec<&Atom>> = vec![Vec::new(); rec.len()];
    for (a, &s) in rec.atoms.iter().zip(&slots) {
        by_residue[s].push(a);
    }
    let mut gt = Vec::with_capacity(b.n_atoms());
    for (r, res) in rec.residues.iter().enumerate() {
        for t in table.atoms(res.aa) {
            let a = by_residue[r].iter().find(|a| a.name == t.name).ok_or_else(|| {
                CoreError::Invalid(format!(
                    "residue {} {} lacks atom {}",
                    res.residue_index,
                    res.aa.code3(),
                    t.name
                ))
            })?;
            gt.push(a.position);
        }
    }
    b.gt_pos = Some(
        center(&gt)
            .into_iter()
            .map(|p| p.map(|v| v / COORD_SCALE))
            .collect(),
    );
    b.check()?;
    Ok(b)
}

/// Residue order chosen by the hybrid crop for a given draw. Exposed for
/// testing against brute-force selection.
pub fn crop_selection(bundle: &FeatureBundle, max_residues: usize, k: usize, center_res: usize) -> Result<Vec<usize>> {
    let gt = bundle.gt_pos.as_ref().ok_or(CoreError::MissingCoordinates("spatial cropping"))?;
    let n = bundle.n_res();
    let anchors = residue_anchors(bundle, gt);
    let mut order: Vec<usize> = (0..n).collect();
    let dist: Vec<f64> = anchors.iter().map(|a| distance(a, &anchors[center_res])).collect();
    order.sort_by(|&a, &b| {
        dist[a]
            .total_cmp(&dist[b])
            .then(bundle.residue_index[a].cmp(&bundle.residue_index[b]))
    });
    let half = k / 2;
    let mut chosen = vec![false; n];
    let mut count = 0;
    for &r in &order {
        if count == max_residues {
            break;
        }
        let lo = r.saturating_sub(half);
        let hi = (r + half).min(n - 1);
        let mut fresh: Vec<usize> = (lo..=hi).filter(|&j| !chosen[j]).collect();
        if count + fresh.len() > max_residues {
            fresh.sort_by(|&a, &b| {
                dist[a]
                    .total_cmp(&dist[b])
                    .then(bundle.residue_index[a].cmp(&bundle.residue_index[b]))
            });
            fresh.truncate(max_residues - count);
        }
        for j in fresh {
            chosen[j] = true;
            count += 1;
        }
    }
    Ok((0..n).filter(|&r| chosen[r]).collect())
}

fn residue_anchors(bundle: &FeatureBundle, gt: &[Point]) -> Vec<Point> {
    let ca = bundle.ca_indices();
    (0..bundle.n_res())
        .map(|r| match ca[r] {
            Some(i) => gt[i],
            None => {
                let pts: Vec<Point> = (0..bundle.n_atoms())
                    .filter(|&i| bundle.atom_to_residue[i] == r)
                    .map(|i| gt[i])
                    .collect();
                crate::geometry::centroid(&pts)
            }
        })
        .collect()
}

/// Restricts a bundle to the given residues (ascending), re-centering `gt_pos`.
pub fn select_residues(bundle: &FeatureBundle, rows: &[usize]) -> Result<FeatureBundle> {
    let mut remap = vec![usize::MAX; bundle.n_res()];
    for (new, &old) in rows.iter().enumerate() {
        remap[old] = new;
    }
    let atoms: Vec<usize> = (0..bundle.n_atoms())
        .filter(|&i| remap[bundle.atom_to_residue[i]] != usize::MAX)
        .collect();
    let pick = |v: &Vec<Point>| atoms.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let out = FeatureBundle {
        name: bundle.name.clone(),
        chain_id: bundle.chain_id.clone(),
        restype: rows.iter().map(|&r| bundle.restype[r]).collect(),
        residue_index: rows.iter().map(|&r| bundle.residue_index[r]).collect(),
        token_index: (0..rows.len()).collect(),
        esm_embed: bundle.esm_embed.as_ref().map(|e| e.select_rows(rows)),
        ref_pos: pick(&bundle.ref_pos),
        ref_mask: atoms.iter().map(|&i| bundle.ref_mask[i]).collect(),
        ref_element: atoms.iter().map(|&i| bundle.ref_element[i]).collect(),
        ref_charge: atoms.iter().map(|&i| bundle.ref_charge[i]).collect(),
        ref_atom_name_chars: atoms.iter().map(|&i| bundle.ref_atom_name_chars[i]).collect(),
        ref_space_uid: atoms.iter().map(|&i| bundle.ref_space_uid[i]).collect(),
        atom_to_residue: atoms.iter().map(|&i| remap[bundle.atom_to_residue[i]]).collect(),
        gt_pos: bundle.gt_pos.as_ref().map(|g| center(&pick(g))),
    };
    out.check()?;
    Ok(out)
}

/// Hybrid contiguous/spatial crop to at most `max_residues` residues.
pub fn crop(bundle: &FeatureBundle, max_residues: usize, rng: &mut impl Rng) -> Result<FeatureBundle> {
    if max_residues == 0 {
        return Err(CoreError::Invalid("max_residues must be at least 1".into()));
    }
    if bundle.n_res() <= max_residues {
        return Ok(bundle.clone());
    }
    if bundle.gt_pos.is_none() {
        return Err(CoreError::MissingCoordinates("spatial cropping"));
    }
    let k = rng.random_range(0..=MAX_CROP_NEIGHBORHOOD);
    let center_res = rng.random_range(0..bundle.n_res());
    let rows = crop_selection(bundle, max_residues, k, center_res)?;
    select_residues(bundle, &rows)
}
