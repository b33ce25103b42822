//! Compares reverse-mode gradients of a small residual network against
//! central finite differences.

use b2a_hdm::autodiff::{Graph, ParamStore};
use b2a_hdm::nn::{Block, Linear, Mode};
use b2a_hdm::rng::{gaussian, stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = stream(42, &[]);
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "block", 8, Some(4), None, &mut rng);
    let head = Linear::new(&mut store, "head", 8, 2, 1.0, &mut rng);
    let x = gaussian(&mut rng, &[3, 4, 8]);
    let target = gaussian(&mut rng, &[3, 4, 2]);

    let loss_of = |s: &ParamStore| -> Result<f64, Box<dyn std::error::Error>> {
        let mut g = Graph::new(s);
        let xi = g.input(x.clone())?;
        let h = block.forward(&mut g, xi, None, &mut Mode::Eval)?;
        let y = head.forward(&mut g, h)?;
        let t = g.input(target.clone())?;
        let l = g.mse(y, t)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new(&store);
    let xi = g.input(x.clone())?;
    let h = block.forward(&mut g, xi, None, &mut Mode::Eval)?;
    let y = head.forward(&mut g, h)?;
    let t = g.input(target.clone())?;
    let loss = g.mse(y, t)?;
    let grads = g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).item());

    let step = 1e-5;
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        let mut worst = 0.0f64;
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + step;
            let up = loss_of(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - step;
            let down = loss_of(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).data()[i];
            worst =
                worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3));
        }
        println!(
            "{:<16} {:>4} values, max rel err {worst:.2e}",
            p.name,
            p.value.len()
        );
    }
    Ok(())
}
