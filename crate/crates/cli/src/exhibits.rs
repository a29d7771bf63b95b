//! Top-activating patch grids and activation heatmaps for chosen latents.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};

use patchsae::metrics::{self, LabeledCodes, ProbeSettings};
use patchsae::model::{self, Model};
use patchsae::store::Dataset;

use crate::args::{ExhibitArgs, Global};
use crate::record::{Recorder, RunRecord};
use crate::{create_dir, manifest_path, to_json, CliError, CliResult};

/// Side of the square every source image is resized to.
pub const IMAGE_SIDE: u32 = 256;
/// Side of one rendered grid cell.
const CELL: u32 = 64;
const GRID_COLUMNS: u32 = 8;
const MISSING: Rgb<u8> = Rgb([128, 128, 128]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub rank: usize,
    pub row: u64,
    pub activation: f32,
    pub image_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub patch_row: u32,
    pub patch_col: u32,
    /// The source image could not be read; its grid cell is left gray.
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhibitRecord {
    pub latent: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    pub heatmaps: Vec<String>,
    pub entries: Vec<EntryRecord>,
}

pub struct ExhibitOutput {
    pub exhibits: Vec<ExhibitRecord>,
    pub record: RunRecord,
}

struct ImageSource {
    dir: Option<PathBuf>,
    ids: Vec<String>,
    cache: HashMap<u64, Option<RgbImage>>,
}

impl ImageSource {
    fn id(&self, index: u64) -> Option<&String> {
        self.ids.get(index as usize)
    }

    fn get(&mut self, index: u64) -> Option<&RgbImage> {
        if !self.cache.contains_key(&index) {
            let loaded = match (&self.dir, self.ids.get(index as usize)) {
                (Some(dir), Some(id)) => match image::open(dir.join(id)) {
                    Ok(img) => Some(imageops::resize(&img.to_rgb8(), IMAGE_SIDE, IMAGE_SIDE, FilterType::CatmullRom)),
                    Err(e) => {
                        warn!("image {id}: {e}");
                        None
                    }
                },
                _ => None,
            };
            self.cache.insert(index, loaded);
        }
        self.cache[&index].as_ref()
    }
}

fn patch_crop(img: &RgbImage, grid: [u32; 2], row: u32, col: u32) -> RgbImage {
    let (h, w) = (IMAGE_SIDE / grid[0], IMAGE_SIDE / grid[1]);
    let patch = imageops::crop_imm(img, col * w, row * h, w, h).to_image();
    imageops::resize(&patch, CELL, CELL, FilterType::Nearest)
}

/// Blends a red overlay proportional to each patch's activation.
fn heatmap(img: &RgbImage, grid: [u32; 2], activations: &[f64], scale: f64) -> RgbImage {
    let mut out = img.clone();
    let (h, w) = (IMAGE_SIDE / grid[0], IMAGE_SIDE / grid[1]);
    for (y, x, px) in out.enumerate_pixels_mut() {
        let (r, c) = ((y / h).min(grid[0] - 1), (x / w).min(grid[1] - 1));
        let a = activations[(r * grid[1] + c) as usize];
        let alpha = if scale > 0.0 { 0.6 * (a / scale).clamp(0.0, 1.0) } else { 0.0 };
        for (ch, target) in px.0.iter_mut().zip([255.0, 0.0, 0.0]) {
            *ch = ((1.0 - alpha) * *ch as f64 + alpha * target).round() as u8;
        }
    }
    out
}

pub fn exhibits(global: &Global, args: &ExhibitArgs) -> CliResult<ExhibitOutput> {
    if args.k == 0 {
        return Err(CliError::Usage("--k must be positive".into()));
    }
    if args.latents.is_empty() && !args.per_class {
        return Err(CliError::Usage("pass --latents or --per-class".into()));
    }
    let mut rec = Recorder::start("exhibits", global.seed.unwrap_or(0));
    rec.config(&format!("{:?} per_class={} k={}", args.latents, args.per_class, args.k));
    rec.input_file(&args.checkpoint)?;
    let model = Model::load(&args.checkpoint)?;
    let manifest = manifest_path(&args.data);
    rec.input_dataset(&manifest)?;
    let dataset = Dataset::open(&manifest)?;
    let grid = dataset.manifest().patch_grid;
    if grid[0] == 0 || grid[1] == 0 || !IMAGE_SIDE.is_multiple_of(grid[0]) || !IMAGE_SIDE.is_multiple_of(grid[1]) {
        return Err(CliError::Runtime(format!("patch grid {grid:?} does not tile {IMAGE_SIDE} pixels")));
    }
    let per_image = (grid[0] * grid[1]) as u64;
    let ids: Vec<u64> = (0..dataset.count()).collect();
    let split = model::encode_rows(&model, &dataset, &ids)?;

    let latents: Vec<(usize, Option<u16>)> = if args.per_class {
        let num_classes = model::shared_vocabulary(&dataset, &dataset)?;
        let codes = LabeledCodes {
            codes: &split.codes,
            labels: &split.labels,
        };
        metrics::align_classes(&codes, num_classes, &ProbeSettings::default())
            .into_iter()
            .flatten()
            .map(|a| (a.latent, Some(a.class)))
            .collect()
    } else {
        args.latents.iter().map(|&l| (l, None)).collect()
    };
    let manifest_entries = model::exhibit_manifest(&split.codes, &split.row_ids, &latents, args.k, grid)?;

    let mut images = ImageSource {
        dir: args.images.clone(),
        ids: dataset.manifest().image_ids.clone(),
        cache: HashMap::new(),
    };
    if args.images.is_none() {
        warn!("no --images directory; writing the manifest without pictures");
    }
    let out = &global.out;
    create_dir(out)?;
    let mut records = Vec::with_capacity(manifest_entries.len());
    for ex in manifest_entries {
        let mut entries = Vec::with_capacity(ex.entries.len());
        let cols = GRID_COLUMNS.min(ex.entries.len().max(1) as u32);
        let rows = (ex.entries.len() as u32).div_ceil(cols).max(1);
        let mut canvas = RgbImage::from_pixel(cols * CELL, rows * CELL, MISSING);
        let mut any_image = false;
        for e in &ex.entries {
            let img = images.get(e.image_index).cloned();
            if let Some(img) = &img {
                let cell = patch_crop(img, grid, e.patch_row, e.patch_col);
                let (cx, cy) = ((e.rank as u32 % cols) * CELL, (e.rank as u32 / cols) * CELL);
                imageops::replace(&mut canvas, &cell, cx as i64, cy as i64);
                any_image = true;
            } else if args.images.is_some() {
                warn!("latent {}: rank {} source image unavailable", ex.latent, e.rank);
            }
            entries.push(EntryRecord {
                rank: e.rank,
                row: e.row,
                activation: e.activation,
                image_index: e.image_index,
                image_id: images.id(e.image_index).cloned(),
                patch_row: e.patch_row,
                patch_col: e.patch_col,
                missing: img.is_none(),
            });
        }
        let mut grid_name = None;
        let mut heatmaps = Vec::new();
        if any_image {
            let name = format!("latent-{:05}.png", ex.latent);
            save_png(&canvas, &out.join(&name), &mut rec)?;
            grid_name = Some(name);
            let column = split.codes.dense_column(ex.latent);
            let scale = column.iter().cloned().fold(0.0, f64::max);
            let distinct: BTreeSet<u64> = ex.entries.iter().map(|e| e.image_index).collect();
            for index in distinct {
                let Some(img) = images.get(index).cloned() else { continue };
                let start = (index * per_image) as usize;
                let map = heatmap(&img, grid, &column[start..start + per_image as usize], scale);
                let name = format!("heatmap-{:05}-img{index:06}.png", ex.latent);
                save_png(&map, &out.join(&name), &mut rec)?;
                heatmaps.push(name);
            }
        }
        records.push(ExhibitRecord {
            latent: ex.latent,
            class: ex.class,
            grid: grid_name,
            heatmaps,
            entries,
        });
    }
    rec.write(&out.join("exhibits.json"), to_json(&records))?;
    let (_, record) = rec.finish(out)?;
    Ok(ExhibitOutput {
        exhibits: records,
        record,
    })
}

fn save_png(img: &RgbImage, path: &Path, rec: &mut Recorder) -> CliResult<()> {
    img.save(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    rec.output(path)?;
    Ok(())
}
