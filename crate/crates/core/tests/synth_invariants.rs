use std::collections::BTreeSet;

use cellmap::ingest::{emit_nuclei_json, parse_nuclei, rescale_to_map};
use cellmap::synth::{generate_cohort, summarize, CohortConfig, SyntheticSlide};
use cellmap::{CellClass, ClassCodeTable, GrowthPattern, RecordPolicy};

fn cohort() -> Vec<SyntheticSlide> {
    generate_cohort(&CohortConfig {
        per_class: 100,
        base_seed: 20,
        width: 2048,
        height: 2048,
        ..CohortConfig::default()
    })
    .unwrap()
}

/// Share of tiles, pooled over slides, holding at least one connective nucleus.
fn connective_coverage(slides: &[&SyntheticSlide]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in slides {
        let tiles: BTreeSet<(usize, usize)> = s
            .records
            .iter()
            .filter(|r| r.class == CellClass::Connective)
            .map(|r| {
                let (x, y) = rescale_to_map(r, &s.meta);
                ((y / 256.0) as usize, (x / 256.0) as usize)
            })
            .collect();
        hit += s.tiles.iter().filter(|t| tiles.contains(t)).count();
        total += s.tiles.len();
    }
    hit as f64 / total as f64
}

#[test]
fn class_signatures_hold_across_100_slides_each() {
    let slides = cohort();
    assert_eq!(slides.len(), 600);

    let summary = summarize(&slides);
    let neo = |g: GrowthPattern| summary.iter().find(|s| s.class == g).unwrap().mean_neoplastic_per_tile;
    let order = [
        GrowthPattern::Solid,
        GrowthPattern::Acinar,
        GrowthPattern::Lepidic,
        GrowthPattern::Micropapillary,
    ];
    for w in order.windows(2) {
        assert!(
            neo(w[0]) > neo(w[1]),
            "{:?} {} <= {:?} {}",
            w[0],
            neo(w[0]),
            w[1],
            neo(w[1])
        );
    }

    let nontumor = summary.iter().find(|s| s.class == GrowthPattern::NonTumor).unwrap();
    assert_eq!(nontumor.mean_neoplastic_per_tile, 0.0);
    assert!(nontumor.mean_non_neoplastic_per_tile > 0.0);

    for g in GrowthPattern::ALL {
        let of: Vec<&SyntheticSlide> = slides.iter().filter(|s| s.pattern == g).collect();
        let cov = connective_coverage(&of);
        match g {
            GrowthPattern::Papillary => assert!(cov >= 0.95, "papillary coverage {cov}"),
            GrowthPattern::NonTumor => {}
            _ => assert!(cov < 0.95, "{g:?} coverage {cov}"),
        }
    }
}

#[test]
fn slides_survive_json_round_trip() {
    let table = ClassCodeTable::default();
    let slides = generate_cohort(&CohortConfig {
        per_class: 2,
        base_seed: 5,
        ..CohortConfig::default()
    })
    .unwrap();
    for s in &slides {
        let doc = emit_nuclei_json(&s.records, &s.meta, &table).unwrap();
        let back = parse_nuclei(&doc, &table, RecordPolicy::Strict).unwrap();
        assert_eq!(back.records, s.records, "{}", s.meta.slide_id);
        assert!(back.rejected.is_empty());
    }
}
