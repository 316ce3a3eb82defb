use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use crate::autodiff::{Tape, Var};
use crate::data::{GazeSample, InputShape};
use crate::error::{Error, Result};
use crate::field::{field_stack, Direction, NormalizedPoint};
use crate::heatmap::{encode_gt, Heatmap};
use crate::params::{Checkpoint, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DIRECTION_PREFIX: &str = "direction.";
pub const HEATMAP_PREFIX: &str = "heatmap.";

#[derive(Debug, Clone, Copy)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct DirectionIds {
    convs: [Layer; 3],
    position: [Layer; 3],
    fusion: Layer,
    out: Layer,
}

#[derive(Debug, Clone)]
struct HeatmapIds {
    stem: Layer,
    encoder: Vec<Layer>,
    /// `decoder[l]` produces level `l` from level `l + 1`.
    decoder: Vec<Layer>,
    head: Layer,
}

/// Architecture and resolutions, stored in checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub model: ModelConfig,
    pub gammas: Vec<f64>,
    pub scene_resolution: usize,
    pub heatmap_resolution: usize,
}

impl NetworkSpec {
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        train.check_model(model)?;
        Ok(NetworkSpec {
            model: model.clone(),
            gammas: train.gammas.clone(),
            scene_resolution: train.scene_resolution,
            heatmap_resolution: train.heatmap_resolution,
        })
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape {
            scene: self.scene_resolution,
            crop: self.model.direction.crop_resolution,
        }
    }

    fn stem_geometry(&self) -> (usize, usize, usize) {
        let ratio = self.scene_resolution / self.heatmap_resolution;
        if ratio == 1 {
            (3, 1, 1)
        } else {
            (ratio, ratio, 0)
        }
    }
}

/// The two-pathway gaze network.
#[derive(Debug, Clone)]
pub struct GazeNet {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    direction: DirectionIds,
    heatmap: HeatmapIds,
}

/// Stacked network inputs and targets for a batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[n, 3, crop, crop]`
    pub crops: Tensor,
    /// `[n, 3, scene, scene]`
    pub scenes: Tensor,
    /// `[n, 2]`
    pub positions: Tensor,
    pub heads: Vec<NormalizedPoint>,
    /// `[n, 2]`, unit ground-truth directions.
    pub directions: Tensor,
    /// `[n, 1, h, h]`, present when targets were requested.
    pub targets: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Stack `samples`; `targets` gives the heatmap resolution and Gaussian width.
    pub fn new(samples: &[&GazeSample], targets: Option<(usize, f64)>) -> Result<Batch> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let n = samples.len();
        let stack = |pick: &dyn Fn(&GazeSample) -> &Tensor| -> Result<Tensor> {
            let shape = pick(first).shape().to_vec();
            let mut values = Vec::with_capacity(n * pick(first).len());
            for s in samples {
                let t = pick(s);
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape("batch", format!("{:?} vs {:?} in {}", t.shape(), shape, s.id)));
                }
                values.extend_from_slice(t.values());
            }
            let mut full = vec![n];
            full.extend(shape);
            Tensor::new(full, values)
        };
        let crops = stack(&|s| &s.head_crop)?;
        let scenes = stack(&|s| &s.scene)?;
        let positions = Tensor::new(vec![n, 2], samples.iter().flat_map(|s| [s.head.x, s.head.y]).collect())?;
        let directions = Tensor::new(
            vec![n, 2],
            samples.iter().flat_map(|s| [s.direction.dx, s.direction.dy]).collect(),
        )?;
        let targets = match targets {
            Some((res, sigma)) => {
                let mut values = Vec::with_capacity(n * res * res);
                for s in samples {
                    values.extend(encode_gt(s.mean_gaze(), res, res, sigma)?.values);
                }
                Some(Tensor::new(vec![n, 1, res, res], values)?)
            }
            None => None,
        };
        Ok(Batch {
            crops,
            scenes,
            positions,
            heads: samples.iter().map(|s| s.head).collect(),
            directions,
            targets,
        })
    }
}

/// Tape handles produced by a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// `[n, 2]`, unit length.
    pub direction: Var,
    /// `[n, |gammas|, scene, scene]`
    pub fields: Var,
    /// `[n, 1, h, h]`, in `(0, 1)`.
    pub heatmap: Var,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn conv_layer(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) -> Layer {
    Layer {
        weight: store.add(format!("{name}.weight"), he_normal(rng, vec![cout, cin, k, k], cin * k * k)),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![cout])),
    }
}

fn dense_layer(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Layer {
    Layer {
        weight: store.add(format!("{name}.weight"), he_normal(rng, vec![fan_in, fan_out], fan_in)),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
    }
}

impl GazeNet {
    /// Freshly initialized network; `seed` fixes every weight.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<GazeNet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dcfg = &spec.model.direction;

        let mut cin = 3;
        let convs = std::array::from_fn(|i| {
            let l = conv_layer(&mut params, &mut rng, &format!("direction.conv{i}"), cin, dcfg.conv_channels[i], 3);
            cin = dcfg.conv_channels[i];
            l
        });
        let pw = dcfg.position_width;
        let position = std::array::from_fn(|i| {
            let fan_in = if i == 0 { 2 } else { pw };
            dense_layer(&mut params, &mut rng, &format!("direction.position{i}"), fan_in, pw)
        });
        let fusion = dense_layer(&mut params, &mut rng, "direction.fusion", dcfg.conv_channels[2] + pw, dcfg.fusion_width);
        let out = dense_layer(&mut params, &mut rng, "direction.out", dcfg.fusion_width, 2);
        // a non-zero bias keeps the output normalizable when every fusion unit is inactive
        *params.get_mut(out.bias) = Tensor::uniform(vec![2], -0.1, 0.1, &mut rng);

        let ch = &spec.model.heatmap.channels;
        let (k, _, _) = spec.stem_geometry();
        let stem = conv_layer(&mut params, &mut rng, "heatmap.stem", 3 + spec.gammas.len(), ch[0], k);
        let encoder = (1..ch.len())
            .map(|l| conv_layer(&mut params, &mut rng, &format!("heatmap.encoder{l}"), ch[l - 1], ch[l], 3))
            .collect();
        let decoder = (0..ch.len() - 1)
            .map(|l| conv_layer(&mut params, &mut rng, &format!("heatmap.decoder{l}"), ch[l + 1] + ch[l], ch[l], 3))
            .collect();
        let head = conv_layer(&mut params, &mut rng, "heatmap.head", ch[0], 1, 1);
        // sigmoid(-4) is close to the mean target value
        params.get_mut(head.bias).values_mut()[0] = -4.0;

        Ok(GazeNet {
            spec,
            params,
            direction: DirectionIds {
                convs,
                position,
                fusion,
                out,
            },
            heatmap: HeatmapIds {
                stem,
                encoder,
                decoder,
                head,
            },
        })
    }

    pub fn direction_params(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix(DIRECTION_PREFIX)
    }

    pub fn heatmap_params(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix(HEATMAP_PREFIX)
    }

    fn conv(&self, tape: &mut Tape, vars: &[Var], x: Var, layer: Layer, stride: usize, pad: usize) -> Result<Var> {
        let y = tape.conv2d(x, vars[layer.weight.0], stride, pad)?;
        tape.bias_add(y, vars[layer.bias.0])
    }

    fn dense(&self, tape: &mut Tape, vars: &[Var], x: Var, layer: Layer) -> Result<Var> {
        tape.linear(x, vars[layer.weight.0], vars[layer.bias.0])
    }

    /// Unit gaze directions `[n, 2]` from head crops `[n, 3, c, c]` and head positions `[n, 2]`.
    pub fn direction_forward(&self, tape: &mut Tape, vars: &[Var], crops: Var, positions: Var) -> Result<Var> {
        let c = self.spec.model.direction.crop_resolution;
        let shape = tape.value(crops).shape();
        if shape.len() != 4 || shape[1..] != [3, c, c] {
            return Err(Error::shape("direction_forward", format!("expected [n, 3, {c}, {c}] crops, got {shape:?}")));
        }
        let n = shape[0];
        if tape.value(positions).shape() != [n, 2] {
            return Err(Error::shape(
                "direction_forward",
                format!("expected [{n}, 2] positions, got {:?}", tape.value(positions).shape()),
            ));
        }
        let mut x = crops;
        for (layer, &stride) in self.direction.convs.iter().zip(&self.spec.model.direction.conv_strides) {
            x = self.conv(tape, vars, x, *layer, stride, 1)?;
            x = tape.relu(x)?;
        }
        let appearance = tape.global_avg_pool(x)?;
        let mut p = positions;
        for layer in self.direction.position {
            p = self.dense(tape, vars, p, layer)?;
            p = tape.relu(p)?;
        }
        let joint = tape.concat(&[appearance, p])?;
        let h = self.dense(tape, vars, joint, self.direction.fusion)?;
        let h = tape.relu(h)?;
        let d = self.dense(tape, vars, h, self.direction.out)?;
        tape.l2_normalize(d)
    }

    /// Heatmaps `[n, 1, h, h]` from scenes `[n, 3, s, s]` and fields `[n, |gammas|, s, s]`.
    pub fn heatmap_forward(&self, tape: &mut Tape, vars: &[Var], image: Var, fields: Var) -> Result<Var> {
        let s = self.spec.scene_resolution;
        let k = self.spec.gammas.len();
        let (ishape, fshape) = (tape.value(image).shape(), tape.value(fields).shape());
        if ishape.len() != 4 || ishape[1..] != [3, s, s] {
            return Err(Error::shape("heatmap_forward", format!("expected [n, 3, {s}, {s}] image, got {ishape:?}")));
        }
        if fshape != [ishape[0], k, s, s] {
            return Err(Error::shape(
                "heatmap_forward",
                format!("expected [{}, {k}, {s}, {s}] fields, got {fshape:?}", ishape[0]),
            ));
        }
        let x = tape.concat(&[image, fields])?;
        let (_, stride, pad) = self.spec.stem_geometry();
        let x = self.conv(tape, vars, x, self.heatmap.stem, stride, pad)?;
        let mut levels = vec![tape.relu(x)?];
        for layer in &self.heatmap.encoder {
            let y = self.conv(tape, vars, *levels.last().unwrap(), *layer, 2, 1)?;
            levels.push(tape.relu(y)?);
        }
        let mut x = levels.pop().unwrap();
        for (layer, skip) in self.heatmap.decoder.iter().zip(levels).rev() {
            let up = tape.upsample_nearest(x, 2)?;
            let merged = tape.concat(&[up, skip])?;
            let y = self.conv(tape, vars, merged, *layer, 1, 1)?;
            x = tape.relu(y)?;
        }
        let logits = self.conv(tape, vars, x, self.heatmap.head, 1, 0)?;
        tape.sigmoid(logits)
    }

    /// Directions, fields and heatmaps for a batch. Gradients reach the direction pathway
    /// through the field stack.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Outputs> {
        let crops = tape.constant(batch.crops.clone());
        let positions = tape.constant(batch.positions.clone());
        let direction = self.direction_forward(tape, vars, crops, positions)?;
        let s = self.spec.scene_resolution;
        let fields = field_stack(tape, direction, &batch.heads, s, s, &self.spec.gammas)?;
        let image = tape.constant(batch.scenes.clone());
        let heatmap = self.heatmap_forward(tape, vars, image, fields)?;
        Ok(Outputs {
            direction,
            fields,
            heatmap,
        })
    }

    /// Predicted directions and heatmaps, without recording gradients.
    pub fn predict(&self, samples: &[&GazeSample]) -> Result<Vec<(Direction, Heatmap)>> {
        let batch = Batch::new(samples, None)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, |_| false);
        let out = self.forward(&mut tape, &vars, &batch)?;
        let h = self.spec.heatmap_resolution;
        let dirs = tape.value(out.direction).values();
        let maps = tape.value(out.heatmap).values();
        Ok((0..batch.len())
            .map(|i| {
                let heatmap = Heatmap {
                    width: h,
                    height: h,
                    values: maps[i * h * h..(i + 1) * h * h].to_vec(),
                };
                (Direction::new(dirs[2 * i], dirs[2 * i + 1]), heatmap)
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(self.params.to_checkpoint(serde_json::to_value(&self.spec)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<GazeNet> {
        let spec: NetworkSpec = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata is not a network description: {e}")))?;
        let mut net = GazeNet::new(spec, 0)?;
        net.params.load_checkpoint(ckpt)?;
        Ok(net)
    }
}
