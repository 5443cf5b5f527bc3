use hovertrans::autodiff::Graph;
use hovertrans::data::synth::{generate, SynthConfig};
use hovertrans::data::batch_to_input;
use hovertrans::model::{build_model, loss, ModelConfig};
use hovertrans::raster::Raster;

fn main() {
    let records = generate(&SynthConfig { side: 32, count: 8, seed: 3 });
    let rasters: Vec<&Raster> = records.iter().map(|r| &r.image).collect();
    let batch = batch_to_input(&rasters, 32).unwrap();
    let labels: Vec<usize> = records.iter().map(|r| r.label.index()).collect();
    let net = build_model(&ModelConfig::tiny(), 5).unwrap();
    let mut g = Graph::new();
    let trace = net.forward_graph(&mut g, &batch).unwrap();
    println!("logits: {:?}", g.value(trace.logits));
    let l = loss(&mut g, trace.logits, &labels).unwrap();
    println!("loss: {}", g.value(l)[[0]]);
    g.backward(l);
    let grads = g.param_grads();
    let mut by_prefix: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for (pid, grad) in &grads {
        let name = &net.store.get(*pid).name;
        let prefix = name.split('.').next().unwrap().to_string();
        let norm: f64 = grad.iter().map(|v| v * v).sum::<f64>();
        let e = by_prefix.entry(prefix).or_insert((0.0, 0));
        e.0 += norm;
        e.1 += grad.len();
    }
    for (prefix, (norm, n)) in by_prefix {
        println!("{prefix:<10} rms grad {:12.3e}  ({n} scalars)", (norm / n as f64).sqrt());
    }
}
