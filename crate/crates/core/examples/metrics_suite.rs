//! Runs the retrieval and distribution metrics on hand-made feature sets:
//! a close match, a shifted copy and pure noise.

use std::collections::BTreeMap;

use b2a_hdm::metrics::{
    diversity, fid, mm_dist, mmodality, r_precision, FeaturePair, GaussianStats,
};
use b2a_hdm::rng::{gaussian_vec, stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dim = 6;
    let labels = 40;
    let mut rng = stream(9, &[]);
    let conds: Vec<Vec<f64>> = (0..labels).map(|_| gaussian_vec(&mut rng, dim)).collect();
    let real: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            let n = gaussian_vec(&mut rng, dim);
            conds[i % labels]
                .iter()
                .zip(n)
                .map(|(c, e)| c + 0.3 * e)
                .collect()
        })
        .collect();
    let real_stats = GaussianStats::fit(&real)?;
    let ids: Vec<usize> = (0..400).map(|i| i % labels).collect();

    for (name, noise, shift) in [
        ("close", 0.3, 0.0),
        ("shifted", 0.3, 0.8),
        ("noise", 3.0, 0.0),
    ] {
        let gen: Vec<Vec<f64>> = (0..400)
            .map(|i| {
                let n = gaussian_vec(&mut rng, dim);
                conds[i % labels]
                    .iter()
                    .zip(n)
                    .map(|(c, e)| c + noise * e + shift)
                    .collect()
            })
            .collect();
        let pairs: Vec<FeaturePair> = gen
            .iter()
            .zip(&ids)
            .map(|(g, &c)| FeaturePair::new(g.clone(), conds[c].clone()))
            .collect::<Result<_, _>>()?;
        let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (g, &c) in gen.iter().zip(&ids) {
            groups.entry(c).or_default().push(g.clone());
        }
        let rp = r_precision(&pairs, &ids, 32, 1)?;
        println!(
            "{name:<8} FID {:>8.4}  top1/2/3 {:.3}/{:.3}/{:.3}  MM-Dist {:.3}  diversity {:.3}  MModality {:.3}",
            fid(&real_stats, &GaussianStats::fit(&gen)?)?,
            rp.top1,
            rp.top2,
            rp.top3,
            mm_dist(&pairs)?,
            diversity(&gen, 100, 2)?,
            mmodality(&groups, 3, 3)?
        );
    }
    Ok(())
}
