// temporary diagnostic: initial + trained embedding similarity spread
use heterovid::config::RunConfig;
use heterovid::dataset::stack;
use heterovid::synth::SyntheticSpec;
use heterovid_core::Graph;
use heterovid_core::model::Model;

#[test]
fn probe_similarity_regime() {
    let spec = SyntheticSpec::desk_default(12, 1);
    let data = heterovid::synth::generate(&spec).unwrap();
    let run = RunConfig::default();
    let cfg = run.resolve_with_data(&data).unwrap();
    let model: Model<f32> = Model::new(cfg).unwrap();
    let store = model.init_store(run.seed).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let (batch, _) = stack(&data, &idx);
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &store, &batch).unwrap();
    let z = g.value(fwd.embeddings.unwrap());
    let d = 16;
    let mut cosines = vec![];
    for i in 0..16 {
        for j in 0..i {
            let dot: f32 = (0..d).map(|k| z.data()[i*d+k]*z.data()[j*d+k]).sum();
            cosines.push(dot);
        }
    }
    cosines.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("init cos: min {:.3} med {:.3} max {:.3}", cosines[0], cosines[cosines.len()/2], cosines[cosines.len()-1]);
    // pooled feature spread
    let feats = g.value(fwd.fused_features);
    let per: usize = feats.shape()[1..].iter().product();
    let mut means = vec![];
    for i in 0..16 { 
        let m: f32 = feats.data()[i*per..(i+1)*per].iter().sum::<f32>()/per as f32;
        means.push(m);
    }
    println!("fused feature means: {:?}", &means[..8]);
}
