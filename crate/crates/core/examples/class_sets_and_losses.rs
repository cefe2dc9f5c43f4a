//! Class sets each supervision method uses per label availability, and the
//! resulting CE + Dice values on one random logit volume.

use partseg::labelspace::{loss_terms, Class, Label, LabelAvailability, Method};
use partseg::loss::{combined_loss_sets, LossConfig};
use partseg::volume::{Geometry, LabelVolume, Logits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> partseg::Result<()> {
    let g = Geometry::isotropic([8, 8, 8])?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let full = vec![Class::Bg, Class::Wmh, Class::Isl];
    let logits = Logits::new(g, full.clone(), (0..g.len() * 3).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let labels = LabelVolume::from_fn(g, |p| match (p[0] + p[1]) % 7 {
        0 => Label::Wmh,
        1 => Label::Isl,
        _ => Label::Bg,
    });

    let cases = [
        ("multiclass", LabelAvailability::FULL, Method::Multiclass),
        ("class-adaptive", LabelAvailability::FULL, Method::ClassAdaptive),
        ("class-adaptive", LabelAvailability::WMH_ONLY, Method::ClassAdaptive),
        ("marginal", LabelAvailability::FULL, Method::Marginal),
        ("marginal", LabelAvailability::WMH_ONLY, Method::Marginal),
        ("marginal", LabelAvailability::ISL_ONLY, Method::Marginal),
    ];
    let cfg = LossConfig::default();
    for (name, avail, method) in cases {
        for term in loss_terms(avail, method)? {
            // Unannotated classes read as background.
            let y = labels.map(|l| if avail.has(l) || l == Label::Bg { l } else { Label::Bg });
            let v = combined_loss_sets(&logits, &y, &term.sets, &cfg)?;
            println!(
                "{name:15} wmh={:<5} isl={:<5} CE {:<16} Dice {:<20} ce {:.4} dice {:+.4}",
                avail.has_wmh,
                avail.has_isl,
                term.sets.ce.to_string(),
                term.sets.dice.to_string(),
                v.ce,
                v.dice
            );
        }
    }
    Ok(())
}
