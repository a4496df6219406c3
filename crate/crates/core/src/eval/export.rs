use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::MulConModel;
use crate::tensor::{Real, Tape, Tensor};

/// Label-level embeddings `g` (`N × L × D`) for every image of a split.
pub fn label_embeddings(model: &MulConModel, split: &Split, chunk: usize) -> Result<Tensor> {
    let (l, d) = (model.config.labels, model.config.embed_dim);
    let mut out = Vec::with_capacity(split.len() * l * d);
    let indices: Vec<usize> = (0..split.len()).collect();
    for part in indices.chunks(chunk.max(1)) {
        let batch = split.batch(part);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let x = tape.constant(batch.images);
        let r = model.encode(&mut tape, &vars, x)?;
        let (g, _) = model.label_embeddings(&mut tape, &vars, r)?;
        out.extend_from_slice(tape.value(g).data());
    }
    Tensor::new(&[split.len(), l, d], out)
}

/// Raw per-head attention weights (`N × L × WH` each) for a batch of images.
pub fn attention_maps(model: &MulConModel, images: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let x = tape.constant(images.clone());
    let r = model.encode(&mut tape, &vars, x)?;
    let (_, weights) = model.label_embeddings(&mut tape, &vars, r)?;
    Ok(weights.into_iter().map(|w| tape.value(w).clone()).collect())
}

/// Writes one CSV row per active (image, label): `image_id,label_id,d0..d{D-1}`.
/// Returns the number of rows written.
pub fn export_embeddings(model: &MulConModel, split: &Split, path: impl AsRef<Path>) -> Result<usize> {
    let g = label_embeddings(model, split, 64)?;
    let (l, d) = (model.config.labels, model.config.embed_dim);
    let mut csv = String::from("image_id,label_id");
    for k in 0..d {
        write!(csv, ",d{k}").unwrap();
    }
    csv.push('\n');
    let mut rows = 0;
    for i in 0..split.len() {
        for j in (0..l).filter(|&j| split.labels().get(i, j)) {
            write!(csv, "{i},{j}").unwrap();
            for v in &g.data()[(i * l + j) * d..(i * l + j + 1) * d] {
                write!(csv, ",{v}").unwrap();
            }
            csv.push('\n');
            rows += 1;
        }
    }
    std::fs::write(path, csv)?;
    Ok(rows)
}

/// Binary greyscale PGM (P5).
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!("{} pixels for a {width}×{height} image", pixels.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Min-max normalizes a grid map and upsamples it by nearest neighbour.
fn render_map(map: &[Real], grid: (usize, usize), out: (usize, usize)) -> Vec<u8> {
    let lo = map.iter().copied().fold(Real::INFINITY, Real::min);
    let hi = map.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let span = hi - lo;
    let (gh, gw) = grid;
    let (h, w) = out;
    let mut pixels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * gh / h) * gw + x * gw / w;
            let v = if span > 0.0 { (map[cell] - lo) / span } else { 0.0 };
            pixels[y * w + x] = (v * 255.0).round() as u8;
        }
    }
    pixels
}

/// Attention maps written for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    /// `(label, head-averaged weights over the encoder grid, file)`.
    pub label_maps: Vec<(usize, Vec<Real>, PathBuf)>,
    /// `(head, weights, file)` for the chosen label.
    pub head_maps: Vec<(usize, Vec<Real>, PathBuf)>,
    pub grid: (usize, usize),
}

/// Exports a head-averaged map for every ground-truth label of `image` and a
/// per-head map for `head_label`. Files are `{prefix}_label{j}.pgm` and
/// `{prefix}_label{j}_head{k}.pgm`, upsampled to the input resolution.
pub fn export_attention(
    model: &MulConModel,
    split: &Split,
    image: usize,
    head_label: usize,
    path_prefix: impl AsRef<Path>,
) -> Result<AttentionExport> {
    let l = model.config.labels;
    if image >= split.len() || head_label >= l {
        return Err(Error::InvalidArgument(format!("image {image} / label {head_label} out of range")));
    }
    let batch = split.batch(&[image]);
    let heads = attention_maps(model, &batch.images)?;
    let grid = model.config.encoder.grid();
    let cells = grid.0 * grid.1;
    let out = (split.height(), split.width());
    let prefix = path_prefix.as_ref().to_string_lossy().into_owned();
    let head_row = |h: &Tensor, j: usize| h.data()[j * cells..(j + 1) * cells].to_vec();

    let mut label_maps = Vec::new();
    for j in (0..l).filter(|&j| split.labels().get(image, j)) {
        let mut avg = vec![0.0; cells];
        for h in &heads {
            avg.iter_mut().zip(head_row(h, j)).for_each(|(a, v)| *a += v / heads.len() as Real);
        }
        let path = PathBuf::from(format!("{prefix}_label{j}.pgm"));
        write_pgm(&path, out.1, out.0, &render_map(&avg, grid, out))?;
        label_maps.push((j, avg, path));
    }
    let mut head_maps = Vec::new();
    for (k, h) in heads.iter().enumerate() {
        let map = head_row(h, head_label);
        let path = PathBuf::from(format!("{prefix}_label{head_label}_head{k}.pgm"));
        write_pgm(&path, out.1, out.0, &render_map(&map, grid, out))?;
        head_maps.push((k, map, path));
    }
    Ok(AttentionExport { label_maps, head_maps, grid })
}
