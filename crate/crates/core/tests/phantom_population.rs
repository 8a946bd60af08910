//! Population-level properties of the generator over 100 seeds.

use soars_core::phantom::{case_seed, generate_phantom, max_extents, stratum_contrast, PhantomSpec};
use soars_core::{OrganRegistry, Stratum};

fn assert_separated(m: &soars_core::LabelMask) {
    let [d, h, w] = m.shape();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let l = m.get(z, y, x);
                if l == 0 {
                    continue;
                }
                for zz in z.saturating_sub(1)..(z + 2).min(d) {
                    for yy in y.saturating_sub(1)..(y + 2).min(h) {
                        for xx in x.saturating_sub(1)..(x + 2).min(w) {
                            let o = m.get(zz, yy, xx);
                            assert!(o == 0 || o == l, "{l} touches {o}");
                        }
                    }
                }
            }
        }
    }
}

fn check(spec: &PhantomSpec, n: usize) {
    let r = OrganRegistry::canonical();
    let mut sums = [0.0f64; 3];
    for i in 0..n {
        let case = generate_phantom(spec, case_seed(spec.seed, i)).unwrap();
        let mut hist = vec![0usize; 43];
        for l in case.truth.labels() {
            hist[*l as usize] += 1;
        }
        for e in r.entries() {
            assert!(hist[e.label as usize] >= 1, "case {i}: {} missing", e.name);
        }
        assert_separated(&case.truth);
        let c = stratum_contrast(&case);
        assert!(c[&Stratum::Anchor] > c[&Stratum::MidLevel] && c[&Stratum::MidLevel] > c[&Stratum::SmallHard]);
        for (k, s) in Stratum::ALL.iter().enumerate() {
            sums[k] += c[s];
        }
        let ext = max_extents([&case.truth]);
        for l in r.labels(Stratum::SmallHard) {
            assert!(ext[&l].iter().all(|e| *e <= 7));
        }
    }
    assert!(sums[0] > sums[1] && sums[1] > sums[2]);
}

#[test]
fn hundred_cases_at_32() {
    check(&PhantomSpec::with_grid(32), 100);
}

#[test]
fn hundred_cases_at_64() {
    check(&PhantomSpec::default(), 100);
}

#[test]
fn maximum_jitter_still_places() {
    let spec = PhantomSpec { size_jitter: 0.3, ..PhantomSpec::default() };
    check(&spec, 20);
}

#[test]
fn organs_have_expected_scale_at_32() {
    let case = generate_phantom(&PhantomSpec::with_grid(32), 5).unwrap();
    let r = OrganRegistry::canonical();
    let mut hist = vec![0usize; 43];
    for l in case.truth.labels() {
        hist[*l as usize] += 1;
    }
    let mean = |s: Stratum| {
        let ls = r.labels(s);
        ls.iter().map(|l| hist[*l as usize] as f64).sum::<f64>() / ls.len() as f64
    };
    eprintln!("mean voxels: anchor {} mid {} small {}", mean(Stratum::Anchor), mean(Stratum::MidLevel), mean(Stratum::SmallHard));
    assert!(mean(Stratum::Anchor) > mean(Stratum::MidLevel));
    assert!(mean(Stratum::MidLevel) > mean(Stratum::SmallHard));
}
