//! Browser demo. Renders a synthetic room, inserts a virtual plane with an
//! occlusion mask and decodes depth by bisection, all client side.

use implicit_depth::geometry::{render_plane_depth, CameraIntrinsics, DepthMap, PlaneSpec};
use implicit_depth::grid::{Grid, RgbImage};
use implicit_depth::inference::{
    binary_search_depth, blended_mask, composite, predict_mask, BinarySearchConfig,
    CompositingMask, FrameRef, MaskPredictor, StepOracle, ThresholdTable,
};
use implicit_depth::io::{depth_visualization, rgb_to_rgba8};
use implicit_depth::nn::checkpoint::{self, Checkpoint};
use implicit_depth::scene::{generate_scene, generate_sequence, GenerationConfig, Sequence};
use implicit_depth::{Error, Result};
use wasm_bindgen::prelude::*;

pub const WIDTH: usize = 96;
pub const HEIGHT: usize = 64;
const BLEND_BAND: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    GroundTruth,
    Blended,
    Model,
}

impl MaskSource {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ground-truth" => Ok(Self::GroundTruth),
            "blended" => Ok(Self::Blended),
            "model" => Ok(Self::Model),
            other => Err(Error::Config(format!("unknown mask source {other:?}"))),
        }
    }
}

#[wasm_bindgen]
pub struct Demo {
    sequence: Sequence,
    model: Option<Checkpoint>,
    last_search_error: Option<f64>,
}

fn gray_to_rgba(img: &Grid<f32>) -> Vec<u8> {
    rgb_to_rgba8(&img.map(|&g| [g, g, g]))
}

/// Orange checkerboard standing in for a rendered asset.
fn virtual_image(width: usize, height: usize) -> RgbImage {
    Grid::from_fn(width, height, |u, v| {
        if (u / 6 + v / 6) % 2 == 0 {
            [0.95, 0.55, 0.1]
        } else {
            [0.7, 0.25, 0.05]
        }
    })
}

fn scene_sequence(seed: u64) -> Result<Sequence> {
    let k = CameraIntrinsics::desk_scale(WIDTH, HEIGHT);
    let scene = generate_scene(seed, &GenerationConfig::default())?;
    generate_sequence(&scene, seed, 2, &k)
}

impl Demo {
    pub fn create(seed: u64) -> Result<Demo> {
        Ok(Demo {
            sequence: scene_sequence(seed)?,
            model: None,
            last_search_error: None,
        })
    }

    fn frame(&self) -> FrameRef<'_> {
        FrameRef::new(&self.sequence, 0)
    }

    pub fn set_seed(&mut self, seed: u64) -> Result<()> {
        self.sequence = scene_sequence(seed)?;
        self.last_search_error = None;
        Ok(())
    }

    pub fn set_checkpoint(&mut self, bytes: &[u8]) -> Result<&'static str> {
        let ckpt = checkpoint::decode(bytes, std::path::Path::new("uploaded checkpoint"))?;
        let kind = match ckpt {
            Checkpoint::Implicit(..) => "implicit",
            Checkpoint::Regression(..) => "regression",
        };
        self.model = Some(ckpt);
        Ok(kind)
    }

    pub fn mask(&self, plane_depth: f64, source: MaskSource) -> Result<CompositingMask> {
        let spec = PlaneSpec::Frontoparallel { distance: plane_depth };
        spec.validate()?;
        let frame = self.frame();
        let dv = render_plane_depth(&spec, &frame.frame().pose, &self.sequence.intrinsics);
        match (source, &self.model) {
            (MaskSource::GroundTruth, _) => {
                let gt = StepOracle.prepare(frame)?;
                predict_mask(&StepOracle, &gt, frame, &dv, None)
            }
            (MaskSource::Blended, _) => blended_mask(&frame.frame().depth_gt, &dv, BLEND_BAND),
            (MaskSource::Model, Some(Checkpoint::Implicit(model, _))) => {
                let fm = model.prepare(frame)?;
                predict_mask(model, &fm, frame, &dv, None)
            }
            (MaskSource::Model, Some(Checkpoint::Regression(model, _))) => {
                let depth = model.predict_depth(&frame.encoder_input(&model.config)?);
                blended_mask(&depth, &dv, BLEND_BAND)
            }
            (MaskSource::Model, None) => Err(Error::Config("no checkpoint loaded".into())),
        }
    }

    pub fn composite_image(&self, plane_depth: f64, source: MaskSource) -> Result<RgbImage> {
        let mask = self.mask(plane_depth, source)?;
        let real = &self.frame().frame().rgb;
        composite(real, &virtual_image(real.width(), real.height()), &mask)
    }

    /// Bisection depth with `steps` halvings, from the loaded implicit model
    /// or the ground-truth step oracle.
    pub fn search_depth(&mut self, steps: usize, use_model: bool) -> Result<DepthMap> {
        let config = BinarySearchConfig {
            steps,
            ..BinarySearchConfig::default()
        };
        let frame = self.frame();
        let table = ThresholdTable::default();
        let depth = match (&self.model, use_model) {
            (Some(Checkpoint::Implicit(model, _)), true) => {
                let fm = model.prepare(frame)?;
                binary_search_depth(model, &fm, WIDTH, HEIGHT, &config, &table)?
            }
            (_, true) => return Err(Error::Config("no implicit checkpoint loaded".into())),
            (_, false) => {
                let gt = StepOracle.prepare(frame)?;
                binary_search_depth(&StepOracle, &gt, WIDTH, HEIGHT, &config, &table)?
            }
        };
        let gt = &frame.frame().depth_gt;
        let errors: Vec<f64> = depth
            .valid_values()
            .zip(gt.values.iter())
            .map(|(d, g)| (d as f64 - *g as f64).abs())
            .collect();
        self.last_search_error = Some(errors.iter().sum::<f64>() / errors.len().max(1) as f64);
        Ok(depth)
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Demo::create(seed as u64).map_err(js)
    }

    pub fn width(&self) -> usize {
        WIDTH
    }

    pub fn height(&self) -> usize {
        HEIGHT
    }

    /// Regenerates the room and camera from `seed`.
    pub fn regenerate(&mut self, seed: u32) -> std::result::Result<(), JsError> {
        self.set_seed(seed as u64).map_err(js)
    }

    /// Loads an `IMPD` checkpoint; returns its kind.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> std::result::Result<String, JsError> {
        self.set_checkpoint(bytes).map(String::from).map_err(js)
    }

    pub fn real_rgba(&self) -> Vec<u8> {
        rgb_to_rgba8(&self.frame().frame().rgb)
    }

    pub fn depth_rgba(&self) -> Vec<u8> {
        gray_to_rgba(&depth_visualization(&self.frame().frame().depth_gt, 0.5, 8.0))
    }

    /// Composite with a plane at `plane_depth` meters; `source` is
    /// `ground-truth`, `blended` or `model`.
    pub fn composite_rgba(&self, plane_depth: f64, source: &str) -> std::result::Result<Vec<u8>, JsError> {
        let source = MaskSource::parse(source).map_err(js)?;
        self.composite_image(plane_depth, source).map(|img| rgb_to_rgba8(&img)).map_err(js)
    }

    pub fn mask_rgba(&self, plane_depth: f64, source: &str) -> std::result::Result<Vec<u8>, JsError> {
        let source = MaskSource::parse(source).map_err(js)?;
        self.mask(plane_depth, source).map(|m| gray_to_rgba(&m.to_image())).map_err(js)
    }

    pub fn search_rgba(&mut self, steps: usize, use_model: bool) -> std::result::Result<Vec<u8>, JsError> {
        let depth = self.search_depth(steps, use_model).map_err(js)?;
        Ok(gray_to_rgba(&depth_visualization(&depth, 0.5, 8.0)))
    }

    /// Mean absolute error in meters of the last bisection against ground truth.
    pub fn search_error(&self) -> Option<f64> {
        self.last_search_error
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use implicit_depth::nn::{ImplicitModel, ModelConfig};

    #[test]
    fn ground_truth_composite_keeps_real_pixels_behind_the_plane() {
        let demo = Demo::create(3).unwrap();
        let img = demo.composite_image(0.1, MaskSource::GroundTruth).unwrap();
        // everything real is behind a plane at 10 cm: the plane covers it all
        let virt = virtual_image(WIDTH, HEIGHT);
        assert_eq!(img, virt);
        let far = demo.composite_image(50.0, MaskSource::GroundTruth).unwrap();
        assert_eq!(far, demo.sequence.frames[0].rgb);
    }

    #[test]
    fn oracle_search_is_within_one_cell() {
        let mut demo = Demo::create(5).unwrap();
        demo.search_depth(12, false).unwrap();
        let err = demo.last_search_error.unwrap();
        assert!(err <= BinarySearchConfig::default().granularity(), "{err}");
        assert!(demo.search_depth(12, true).is_err());
    }

    #[test]
    fn checkpoint_upload_enables_model_masks() {
        let mut demo = Demo::create(1).unwrap();
        assert!(demo.mask(2.0, MaskSource::Model).is_err());
        let model = ImplicitModel::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        let bytes = checkpoint::encode_implicit(&model, &serde_json::Value::Null);
        assert_eq!(demo.set_checkpoint(&bytes).unwrap(), "implicit");
        let m = demo.mask(2.0, MaskSource::Model).unwrap();
        assert!(m.values.iter().all(|c| (0.0..=1.0).contains(c)));
        demo.search_depth(4, true).unwrap();
    }

    #[test]
    fn regenerate_changes_the_room() {
        let mut demo = Demo::create(1).unwrap();
        let before = demo.real_rgba();
        demo.set_seed(2).unwrap();
        assert_ne!(before, demo.real_rgba());
        assert_eq!(before.len(), WIDTH * HEIGHT * 4);
        assert!(MaskSource::parse("nope").is_err());
    }
}
