//! Finite-difference cases for the network's composite blocks, on top of the
//! tape primitives.

use aqs_tensor::gradcheck::{primitive_cases, GradCase, Trial};
use aqs_tensor::{ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::Csam;
use crate::error::Result;
use crate::layers::{Ctx, Init, Mode};
use crate::loss::{combined_loss, LossConfig};
use crate::neck::{Aspp, FuseBlock};

/// A block whose input and every trainable parameter are differentiated.
fn module_case<M: 'static>(
    name: &'static str,
    dims: [usize; 4],
    build: fn(&mut Init<f64>) -> Result<M>,
    forward: fn(&M, &mut Ctx<f64>, Var) -> Result<Var>,
) -> GradCase {
    GradCase::new(name, move |rng: &mut ChaCha8Rng| {
        let mut store = ParamStore::<f64>::new();
        let module = build(&mut Init::new(&mut store, rng.random())).expect("block builds");
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        let mut inputs = vec![Tensor::randn(dims.to_vec(), 1.0, rng)];
        for &id in &ids {
            // Perturb initial values so unit scales and zero shifts are not special.
            let v = store.value(id);
            let noise: Tensor<f64> = Tensor::randn(v.dims().to_vec(), 0.3, rng);
            let data = v.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            inputs.push(Tensor::new(v.dims().to_vec(), data).expect("dims match"));
        }
        Trial::new(inputs, move |tape, vars| {
            let mut ctx = Ctx::with_tape(&store, Mode::Train, std::mem::take(tape));
            for (&id, &v) in ids.iter().zip(&vars[1..]) {
                ctx.bind(id, v);
            }
            let out = forward(&module, &mut ctx, vars[0]);
            *tape = ctx.tape;
            out.map_err(|e| aqs_tensor::TensorError::Usage(e.to_string()))
        })
    })
}

/// Composite blocks: attention, fuse block, ASPP and the combined loss.
pub fn composite_cases() -> Vec<GradCase> {
    vec![
        module_case("csam", [2, 4, 3, 3], |i| Csam::new(i, "csam", 4, 2), |m, c, x| m.forward(c, x)),
        module_case("fuse_block", [2, 3, 3, 3], |i| FuseBlock::new(i, "fuse", 3, 2, 1e-5), |m, c, x| m.forward(c, x)),
        module_case("aspp", [2, 4, 3, 3], |i| Aspp::new(i, "aspp", 4, &[1, 2], 1e-5), |m, c, x| m.forward(c, x)),
        GradCase::new("combined_loss", |rng: &mut ChaCha8Rng| {
            let (b, h, w) = (rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(2..=4));
            let labels: Vec<u8> = (0..b * h * w).map(|_| rng.random_range(0..3)).collect();
            let aux_labels: Vec<u8> = (0..b * h * w).map(|_| rng.random_range(0..3)).collect();
            let logits = Tensor::randn(vec![b, 3, h, w], 2.0, rng);
            let aux = Tensor::randn(vec![b, 3, h, w], 2.0, rng);
            Trial::new(vec![logits, aux], move |tape, v| {
                let l = combined_loss(tape, v[0], Some(v[1]), &labels, &aux_labels, &LossConfig::default())
                    .map_err(|e| aqs_tensor::TensorError::Usage(e.to_string()))?;
                Ok(l.total)
            })
        }),
    ]
}

/// Primitives followed by composites.
pub fn all_cases() -> Vec<GradCase> {
    let mut cases = primitive_cases();
    cases.extend(composite_cases());
    cases
}

