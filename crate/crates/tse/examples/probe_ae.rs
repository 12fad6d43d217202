// How trainable is the waveform encoder/decoder pair alone?
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tse::autograd::{clip_grad_norm, AdamConfig, AdamOptimizer, Graph, ParamStore};
use tse::dataset::Manifest;
use tse::objectives::{si_snr, wrql_graph};
use tse::separator::{Separator, SeparatorConfig};

fn main() {
    let manifest = Manifest::read(std::path::Path::new("/tmp/overfit_trial/data/manifest.tsv")).unwrap();
    let targets: Vec<Vec<f64>> = (0..8)
        .map(|i| manifest.load_example(i).unwrap().target.samples().to_vec())
        .collect();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sep = Separator::init(&mut store, &SeparatorConfig::toy(), &mut rng);
    let mut ids = sep.encoder_ids();
    ids.extend(sep.decoder_ids());
    let mut opt = AdamOptimizer::new(&store, ids, AdamConfig::adam(1e-4, 1e-7));
    for step in 0..1500 {
        let batch: Vec<&Vec<f64>> = targets.iter().skip((step % 2) * 4).take(4).collect();
        let t = batch[0].len();
        let mut arr = Array2::zeros((4, t));
        for (r, w) in batch.iter().enumerate() {
            arr.row_mut(r).assign(&ndarray::ArrayView1::from(w.as_slice()));
        }
        let mut g = Graph::new();
        let x = g.constant(arr.clone().into_dyn());
        let latent = sep.encode_graph(&mut g, &store, x, true);
        let out = sep.decode_graph(&mut g, &store, latent, Some(t), true);
        let (loss, _) = wrql_graph(&mut g, &arr, out);
        let grads = g.backward(loss);
        let mut by = grads.by_param();
        clip_grad_norm(&mut by, 5.0);
        opt.step(&mut store, &by);
        if step % 100 == 0 || step == 1499 {
            let mut acc = 0.0;
            for w in &targets {
                let t = w.len();
                let mut g = Graph::new();
                let x = g.constant(Array2::from_shape_vec((1, t), w.clone()).unwrap().into_dyn());
                let latent = sep.encode_graph(&mut g, &store, x, false);
                let out = sep.decode_graph(&mut g, &store, latent, Some(t), false);
                acc += si_snr(w, g.value(out).as_slice().unwrap()).unwrap();
            }
            println!("ae step {step}: mean si_snr {:.2} dB", acc / 8.0);
        }
    }
}
