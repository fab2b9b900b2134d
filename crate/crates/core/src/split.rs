use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Corpus, Label};

/// Stratified split of a labelled OOD corpus into a labelled fine-tuning
/// subset holding `fraction` of each class and a held-out test set.
pub fn split_few_shot(ood: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1)")));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, g) in ood.graphs().iter().enumerate() {
        let label = g
            .label
            .ok_or_else(|| Error::Contract(format!("graph {} has no label", g.graph_id)))?;
        by_class[label.class()].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labelled = Vec::new();
    let mut test = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        let take = (members.len() as f64 * fraction).round() as usize;
        if take == 0 || take == members.len() {
            return Err(Error::Config(format!(
                "fraction {fraction} leaves class {:?} ({} graphs) without a labelled or test share",
                Label::from_class(class),
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        labelled.extend_from_slice(&members[..take]);
        test.extend_from_slice(&members[take..]);
    }
    labelled.sort_unstable();
    test.sort_unstable();
    Ok((ood.subset(&labelled), ood.subset(&test)))
}
