//! Per-sample visualization panels: the input render, ground-truth and
//! predicted masks with overlays, ground-truth and reconstructed depth,
//! and a token dump of the generated sequence. Pure output; the run
//! directory it describes is never written.

use std::fmt;
use std::fs;
use std::path::Path;

use spatok_core::grammar::Vocabulary;
use spatok_core::model::Generation;
use spatok_core::scene::SceneSample;

use crate::pnm;

#[derive(Debug)]
pub enum VizError {
    Io { path: String, source: std::io::Error },
    Pnm(pnm::PnmError),
}

impl fmt::Display for VizError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VizError::Io { path, source } => write!(f, "{path}: {source}"),
            VizError::Pnm(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for VizError {}

impl From<pnm::PnmError> for VizError {
    fn from(e: pnm::PnmError) -> Self {
        VizError::Pnm(e)
    }
}

/// Blend `tint` into masked pixels at half strength, leaving the rest
/// of the image untouched.
pub fn overlay(image: &[u8], mask: &[bool], tint: [u8; 3]) -> Vec<u8> {
    let mut out = image.to_vec();
    for (px, &hit) in mask.iter().enumerate() {
        if hit {
            for ch in 0..3 {
                let base = out[px * 3 + ch] as u16;
                out[px * 3 + ch] = ((base + tint[ch] as u16) / 2) as u8;
            }
        }
    }
    out
}

pub fn mask_to_gray(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&b| if b { 255 } else { 0 }).collect()
}

/// One generated token per line: position, id, surface form, role.
pub fn token_dump(ids: &[u32], vocab: &Vocabulary) -> String {
    let mut out = String::from("pos\tid\tsurface\tkind\n");
    for (pos, &id) in ids.iter().enumerate() {
        out.push_str(&format!("{pos}\t{id}\t{}\t{}\n", vocab.surface(id), vocab.kind(id)));
    }
    out
}

const GT_TINT: [u8; 3] = [0, 255, 0];
const PRED_TINT: [u8; 3] = [255, 0, 255];

/// Write the full panel set for one sample into `dir`. Panels that
/// depend on generated structure (predicted mask, reconstructed depth)
/// appear only when the generation produced them.
pub fn write_sample_panels(
    dir: &Path,
    scene: &SceneSample,
    generation: &Generation,
    vocab: &Vocabulary,
) -> Result<(), VizError> {
    fs::create_dir_all(dir)
        .map_err(|source| VizError::Io { path: dir.display().to_string(), source })?;
    let h = scene.depth.height;
    let w = scene.depth.width;

    pnm::write_ppm(&dir.join("input.ppm"), &scene.image, h, w)?;

    let gt_mask = &scene.instances[scene.target_instance].mask;
    pnm::write_pgm8(&dir.join("mask_gt.pgm"), &mask_to_gray(gt_mask), h, w)?;
    pnm::write_ppm(&dir.join("overlay_gt.ppm"), &overlay(&scene.image, gt_mask, GT_TINT), h, w)?;

    if let Some(logits) = &generation.mask_logits {
        let pred: Vec<bool> = logits.iter().map(|&x| x > 0.0).collect();
        pnm::write_pgm8(&dir.join("mask_pred.pgm"), &mask_to_gray(&pred), h, w)?;
        pnm::write_ppm(
            &dir.join("overlay_pred.ppm"),
            &overlay(&scene.image, &pred, PRED_TINT),
            h,
            w,
        )?;
    }

    pnm::write_pgm16(&dir.join("depth_gt.pgm"), &pnm::depth_to_u16(&scene.depth.values), h, w)?;
    if let Some(recon) = &generation.depth {
        pnm::write_pgm16(
            &dir.join("depth_recon.pgm"),
            &pnm::depth_to_u16(&recon.values),
            recon.height,
            recon.width,
        )?;
    }

    let tokens = token_dump(&generation.ids, vocab);
    let path = dir.join("tokens.txt");
    fs::write(&path, tokens)
        .map_err(|source| VizError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use spatok_core::grammar::build_vocabulary;

    #[test]
    fn overlay_touches_only_masked_pixels() {
        let image = vec![100u8; 2 * 2 * 3];
        let mask = vec![true, false, false, true];
        let out = overlay(&image, &mask, [200, 0, 100]);
        assert_eq!(&out[0..3], &[150, 50, 100]);
        assert_eq!(&out[3..6], &[100, 100, 100]);
        assert_eq!(&out[9..12], &[150, 50, 100]);
    }

    #[test]
    fn token_dump_names_roles() {
        let vocab = build_vocabulary(4, &["red", "disc"]).unwrap();
        let ids = [vocab.bos(), vocab.seg(), vocab.dstart(), vocab.code(2).unwrap(), vocab.dend(), vocab.word_id("disc").unwrap(), vocab.eos()];
        let dump = token_dump(&ids, &vocab);
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[1].ends_with("<bos>\tstructural"), "{}", lines[1]);
        assert!(lines[2].contains("seg"), "{}", lines[2]);
        assert!(lines[4].contains("depth_code"), "{}", lines[4]);
        assert!(lines[6].contains("disc\ttext"), "{}", lines[6]);
    }
}
