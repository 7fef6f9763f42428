//! Unpaired translation baseline: generators G: X→Y and F: Y→X, patch
//! discriminators D_X and D_Y, adversarial plus cycle-consistency losses and
//! an alternating update loop.
//!
//! Domain X is the non-target style, Y the target style. Images inside this
//! module are signed ([−1, 1], CHW).

use crate::error::{Error, Result};
use crate::nn::{stack, Conv2d, GroupNorm};
use crate::tensor::{
    AdamConfig, Conv2dSpec, LrSchedule, Optimizer, ParamStore, Rng, Tape, Tensor, Var,
};
use crate::vision::Image;

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    XToY,
    YToX,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleGanConfig {
    pub gen_channels: usize,
    pub res_blocks: usize,
    pub disc_channels: usize,
    pub lambda_cycle: f32,
    pub learning_rate: f64,
    pub beta1: f32,
}

impl Default for CycleGanConfig {
    fn default() -> Self {
        Self {
            gen_channels: 16,
            res_blocks: 4,
            disc_channels: 16,
            lambda_cycle: 10.0,
            learning_rate: 2e-4,
            beta1: 0.5,
        }
    }
}

/// Maps an image batch to an image batch.
pub trait ImageMap {
    fn apply(&self, tape: &Tape, x: &Var) -> Result<Var>;
}

/// Maps an image batch to per-patch probabilities.
pub trait PatchCritic {
    fn judge(&self, tape: &Tape, x: &Var) -> Result<Var>;
}

fn instance_norm(store: &mut ParamStore, name: &str, c: usize) -> GroupNorm {
    GroupNorm::new(store, name, c, c)
}

#[derive(Clone, Debug)]
struct NormConv {
    conv: Conv2d,
    norm: GroupNorm,
}

impl NormConv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: Conv2dSpec,
        rng: &mut Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                c_in,
                c_out,
                k,
                spec,
                true,
                rng,
            ),
            norm: instance_norm(store, &format!("{name}.norm"), c_out),
        }
    }

    fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let h = self.conv.forward(tape, store, x)?;
        self.norm.forward(tape, store, &h)
    }
}

/// conv7 → two stride-2 downs → residual blocks → two upsample+conv ups →
/// conv7 → tanh. Instance normalization throughout.
#[derive(Clone, Debug)]
pub struct Generator {
    pub direction: Direction,
    pub store: ParamStore,
    stem: NormConv,
    down: Vec<NormConv>,
    res: Vec<(NormConv, NormConv)>,
    up: Vec<NormConv>,
    head: Conv2d,
}

impl Generator {
    pub fn new(direction: Direction, channels: usize, res_blocks: usize, rng: &mut Rng) -> Self {
        let tag = match direction {
            Direction::XToY => "g",
            Direction::YToX => "f",
        };
        let mut store = ParamStore::new();
        let c = channels;
        let stem = NormConv::new(
            &mut store,
            &format!("{tag}.stem"),
            3,
            c,
            7,
            Conv2dSpec::new(1, 3),
            rng,
        );
        let down = vec![
            NormConv::new(
                &mut store,
                &format!("{tag}.down0"),
                c,
                2 * c,
                3,
                Conv2dSpec::new(2, 1),
                rng,
            ),
            NormConv::new(
                &mut store,
                &format!("{tag}.down1"),
                2 * c,
                4 * c,
                3,
                Conv2dSpec::new(2, 1),
                rng,
            ),
        ];
        let res = (0..res_blocks)
            .map(|i| {
                let name = format!("{tag}.res{i}");
                (
                    NormConv::new(
                        &mut store,
                        &format!("{name}.a"),
                        4 * c,
                        4 * c,
                        3,
                        Conv2dSpec::SAME3,
                        rng,
                    ),
                    NormConv::new(
                        &mut store,
                        &format!("{name}.b"),
                        4 * c,
                        4 * c,
                        3,
                        Conv2dSpec::SAME3,
                        rng,
                    ),
                )
            })
            .collect();
        let up = vec![
            NormConv::new(
                &mut store,
                &format!("{tag}.up0"),
                4 * c,
                2 * c,
                3,
                Conv2dSpec::SAME3,
                rng,
            ),
            NormConv::new(
                &mut store,
                &format!("{tag}.up1"),
                2 * c,
                c,
                3,
                Conv2dSpec::SAME3,
                rng,
            ),
        ];
        let head = Conv2d::new(
            &mut store,
            &format!("{tag}.head"),
            c,
            3,
            7,
            Conv2dSpec::new(1, 3),
            true,
            rng,
        );
        Self {
            direction,
            store,
            stem,
            down,
            res,
            up,
            head,
        }
    }
}

impl ImageMap for Generator {
    fn apply(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] == 0 {
            return Err(Error::shape(
                "generator",
                format!("input {s:?} needs [batch, 3, 4k, 4k]"),
            ));
        }
        let st = &self.store;
        let mut h = tape.relu(&self.stem.forward(tape, st, x)?)?;
        for layer in &self.down {
            h = tape.relu(&layer.forward(tape, st, &h)?)?;
        }
        for (a, b) in &self.res {
            let r = tape.relu(&a.forward(tape, st, &h)?)?;
            let r = b.forward(tape, st, &r)?;
            h = tape.add(&h, &r)?;
        }
        for layer in &self.up {
            h = tape.upsample2(&h)?;
            h = tape.relu(&layer.forward(tape, st, &h)?)?;
        }
        let out = self.head.forward(tape, st, &h)?;
        tape.tanh(&out)
    }
}

/// Four-layer patch classifier: three stride-2 4×4 convolutions with leaky
/// ReLU, then a 3×3 convolution to one logit per patch and a sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    first: Conv2d,
    mid: Vec<NormConv>,
    last: Conv2d,
}

impl Discriminator {
    pub fn new(tag: &str, channels: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let c = channels;
        let s2 = Conv2dSpec::new(2, 1);
        let first = Conv2d::new(&mut store, &format!("{tag}.l0"), 3, c, 4, s2, true, rng);
        let mid = vec![
            NormConv::new(&mut store, &format!("{tag}.l1"), c, 2 * c, 4, s2, rng),
            NormConv::new(&mut store, &format!("{tag}.l2"), 2 * c, 4 * c, 4, s2, rng),
        ];
        let last = Conv2d::new(
            &mut store,
            &format!("{tag}.l3"),
            4 * c,
            1,
            3,
            Conv2dSpec::SAME3,
            true,
            rng,
        );
        Self {
            store,
            first,
            mid,
            last,
        }
    }
}

impl PatchCritic for Discriminator {
    fn judge(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let st = &self.store;
        let mut h = tape.leaky_relu(&self.first.forward(tape, st, x)?, 0.2)?;
        for layer in &self.mid {
            h = tape.leaky_relu(&layer.forward(tape, st, &h)?, 0.2)?;
        }
        let logits = self.last.forward(tape, st, &h)?;
        tape.sigmoid(&logits)
    }
}

/// (disc_loss, gen_loss) from discriminator outputs on real and fake.
pub fn gan_loss_from_probs(tape: &Tape, d_real: &Var, d_fake: &Var) -> Result<(Var, Var)> {
    let one = tape.constant(Tensor::scalar(1.0));
    let log_real = tape.mean(&tape.log_clamped(d_real, LOG_FLOOR)?)?;
    let inv_fake = tape.sub(&one, d_fake)?;
    let log_inv_fake = tape.mean(&tape.log_clamped(&inv_fake, LOG_FLOOR)?)?;
    let disc = tape.scale(&tape.add(&log_real, &log_inv_fake)?, -1.0)?;
    let gen = tape.scale(&tape.mean(&tape.log_clamped(d_fake, LOG_FLOOR)?)?, -1.0)?;
    Ok((disc, gen))
}

/// disc = −(E log D(real) + E log(1 − D(fake))), gen = −E log D(fake).
pub fn gan_loss(tape: &Tape, d: &dyn PatchCritic, real: &Var, fake: &Var) -> Result<(Var, Var)> {
    if real.shape() != fake.shape() || real.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::shape(
            "gan_loss",
            format!("real {:?} vs fake {:?}", real.shape(), fake.shape()),
        ));
    }
    let dr = d.judge(tape, real)?;
    let df = d.judge(tape, fake)?;
    gan_loss_from_probs(tape, &dr, &df)
}

/// E|F(G(x)) − x| + E|G(F(y)) − y|.
pub fn cycle_loss(
    tape: &Tape,
    g: &dyn ImageMap,
    f: &dyn ImageMap,
    x: &Var,
    y: &Var,
) -> Result<Var> {
    let fgx = f.apply(tape, &g.apply(tape, x)?)?;
    let gfy = g.apply(tape, &f.apply(tape, y)?)?;
    tape.add(&tape.l1(&fgx, x)?, &tape.l1(&gfy, y)?)
}

pub struct GeneratorLoss {
    pub adv_xy: Var,
    pub adv_yx: Var,
    pub cycle: Var,
    pub total: Var,
}

/// gen_loss(D_Y, G(x)) + gen_loss(D_X, F(y)) + λ·cycle.
pub fn total_generator_loss(
    tape: &Tape,
    nets: (
        &dyn ImageMap,
        &dyn ImageMap,
        &dyn PatchCritic,
        &dyn PatchCritic,
    ),
    lambda: f32,
    x: &Var,
    y: &Var,
) -> Result<GeneratorLoss> {
    let (g, f, dx, dy) = nets;
    let gx = g.apply(tape, x)?;
    let fy = f.apply(tape, y)?;
    let adv_xy = gen_term(tape, dy, &gx)?;
    let adv_yx = gen_term(tape, dx, &fy)?;
    let cyc = tape.add(
        &tape.l1(&f.apply(tape, &gx)?, x)?,
        &tape.l1(&g.apply(tape, &fy)?, y)?,
    )?;
    let total = tape.add(&tape.add(&adv_xy, &adv_yx)?, &tape.scale(&cyc, lambda)?)?;
    Ok(GeneratorLoss {
        adv_xy,
        adv_yx,
        cycle: cyc,
        total,
    })
}

fn gen_term(tape: &Tape, d: &dyn PatchCritic, fake: &Var) -> Result<Var> {
    let p = d.judge(tape, fake)?;
    tape.scale(&tape.mean(&tape.log_clamped(&p, LOG_FLOOR)?)?, -1.0)
}

#[derive(Clone, Debug)]
pub struct CycleGanState {
    pub config: CycleGanConfig,
    pub g: Generator,
    pub f: Generator,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
    pub gen_opt: Optimizer,
    pub disc_opt: Optimizer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub disc_x: f32,
    pub disc_y: f32,
    pub gen_xy: f32,
    pub gen_yx: f32,
    pub cycle: f32,
    pub total_gen: f32,
}

impl CycleGanState {
    pub fn new(config: CycleGanConfig, rng: &mut Rng) -> Result<Self> {
        if !(config.lambda_cycle >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_cycle {} must be >= 0",
                config.lambda_cycle
            )));
        }
        let adam = AdamConfig {
            beta1: config.beta1,
            ..AdamConfig::default()
        };
        let lr = LrSchedule::constant(config.learning_rate)?;
        Ok(Self {
            g: Generator::new(Direction::XToY, config.gen_channels, config.res_blocks, rng),
            f: Generator::new(Direction::YToX, config.gen_channels, config.res_blocks, rng),
            d_x: Discriminator::new("dx", config.disc_channels, rng),
            d_y: Discriminator::new("dy", config.disc_channels, rng),
            gen_opt: Optimizer::new(adam, lr.clone(), 1)?,
            disc_opt: Optimizer::new(adam, lr, 1)?,
            config,
        })
    }

    pub fn generator(&self, direction: Direction) -> &Generator {
        match direction {
            Direction::XToY => &self.g,
            Direction::YToX => &self.f,
        }
    }

    /// Cycle loss of the current generators on a batch, no gradients.
    pub fn eval_cycle(&self, x: &Tensor, y: &Tensor) -> Result<f32> {
        let tape = Tape::no_grad();
        let (x, y) = (tape.constant(x.clone()), tape.constant(y.clone()));
        cycle_loss(&tape, &self.g, &self.f, &x, &y)?.value().item()
    }
}

fn set_frozen(stores: &mut [&mut ParamStore], frozen: bool) {
    for s in stores {
        s.set_frozen(frozen);
    }
}

/// One alternating update: discriminators on their losses with the
/// generators frozen, then generators on the total loss with the
/// discriminators frozen. `x` and `y` are signed [batch, 3, H, W] tensors.
pub fn cyclegan_train_step(
    state: &mut CycleGanState,
    x: &Tensor,
    y: &Tensor,
) -> Result<LossReport> {
    if x.shape().first().copied().unwrap_or(0) == 0 || y.shape().first().copied().unwrap_or(0) == 0
    {
        return Err(Error::InvalidArgument("empty cyclegan batch".into()));
    }
    // The generator forward passes do not depend on the discriminators, so
    // one graph serves both phases: fakes are detached for phase (1) and the
    // discriminator terms of phase (2) are read after the update.
    let gen_tape = Tape::new();
    let xv = gen_tape.constant(x.clone());
    let yv = gen_tape.constant(y.clone());
    let gx = state.g.apply(&gen_tape, &xv)?;
    let fy = state.f.apply(&gen_tape, &yv)?;

    set_frozen(&mut [&mut state.g.store, &mut state.f.store], true);
    let disc = (|| {
        let tape = Tape::new();
        let real_x = tape.constant(x.clone());
        let real_y = tape.constant(y.clone());
        let fake_y = tape.constant(gx.to_tensor());
        let fake_x = tape.constant(fy.to_tensor());
        let (dy_loss, _) = gan_loss(&tape, &state.d_y, &real_y, &fake_y)?;
        let (dx_loss, _) = gan_loss(&tape, &state.d_x, &real_x, &fake_x)?;
        let loss = tape.add(&dx_loss, &dy_loss)?;
        let values = (dx_loss.value().item()?, dy_loss.value().item()?);
        tape.backward(&loss, &mut [&mut state.d_x.store, &mut state.d_y.store])?;
        state
            .disc_opt
            .micro_step(&mut [&mut state.d_x.store, &mut state.d_y.store])?;
        Ok::<_, Error>(values)
    })();
    set_frozen(&mut [&mut state.g.store, &mut state.f.store], false);
    let (disc_x, disc_y) = disc?;

    set_frozen(&mut [&mut state.d_x.store, &mut state.d_y.store], true);
    let gen = (|| {
        let t = &gen_tape;
        let adv_xy = gen_term(t, &state.d_y, &gx)?;
        let adv_yx = gen_term(t, &state.d_x, &fy)?;
        let cyc = t.add(
            &t.l1(&state.f.apply(t, &gx)?, &xv)?,
            &t.l1(&state.g.apply(t, &fy)?, &yv)?,
        )?;
        let total = t.add(
            &t.add(&adv_xy, &adv_yx)?,
            &t.scale(&cyc, state.config.lambda_cycle)?,
        )?;
        Ok::<_, Error>((adv_xy, adv_yx, cyc, total))
    })();
    set_frozen(&mut [&mut state.d_x.store, &mut state.d_y.store], false);
    let (adv_xy, adv_yx, cyc, total) = gen?;
    let report = LossReport {
        disc_x,
        disc_y,
        gen_xy: adv_xy.value().item()?,
        gen_yx: adv_yx.value().item()?,
        cycle: cyc.value().item()?,
        total_gen: total.value().item()?,
    };
    gen_tape.backward(&total, &mut [&mut state.g.store, &mut state.f.store])?;
    state
        .gen_opt
        .micro_step(&mut [&mut state.g.store, &mut state.f.store])?;
    let values = [
        report.disc_x,
        report.disc_y,
        report.gen_xy,
        report.gen_yx,
        report.cycle,
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("cyclegan losses {values:?}")));
    }
    Ok(report)
}

/// Runs one generator on a [0, 1] image and maps the result back to [0, 1].
pub fn translate(state: &CycleGanState, image: &Image, direction: Direction) -> Result<Image> {
    let x = stack(&[image.to_rgb().to_signed_chw()])?;
    let tape = Tape::no_grad();
    let out = state.generator(direction).apply(&tape, &tape.constant(x))?;
    Image::from_signed_chw(out.value())
}

/// Signed NCHW batch from [0, 1] images.
pub fn image_batch(images: &[&Image]) -> Result<Tensor> {
    let parts: Vec<Tensor> = images
        .iter()
        .map(|im| im.to_rgb().to_signed_chw())
        .collect();
    stack(&parts)
}
