use image::{Rgb, RgbImage};
use necroscope::slide_store::{load_manifest, write_pyramid, Manifest, SlideMeta, PAD_RGB};
use necroscope::synth::{generate_slide, render_mask, render_slide, SynthSpec};
use necroscope::tiler::{extract, field_origin, padding_map, schedule, Magnification};
use necroscope::TissueClass;
use proptest::prelude::*;

/// Deterministic non-white test pattern.
fn pattern(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        Rgb([(x * 7 + y * 3) as u8 % 250, (x * 13) as u8 % 250, (y * 5 + 11) as u8 % 250])
    })
}

/// Straightforward box average, written independently of the library.
fn oracle_downsample(src: &RgbImage, f: u32) -> RgbImage {
    let (w, h) = src.dimensions();
    RgbImage::from_fn(w.div_ceil(f), h.div_ceil(f), |ox, oy| {
        let mut acc = [0f64; 3];
        let mut n = 0.0;
        for y in (oy * f)..(oy * f + f) {
            for x in (ox * f)..(ox * f + f) {
                if x < w && y < h {
                    let p = src.get_pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                    n += 1.0;
                }
            }
        }
        Rgb(acc.map(|a| (a / n).round() as u8))
    })
}

fn within_one(a: &RgbImage, b: &RgbImage) -> bool {
    a.dimensions() == b.dimensions()
        && a.as_raw().iter().zip(b.as_raw()).all(|(x, y)| (*x as i32 - *y as i32).abs() <= 1)
}

#[test]
fn full_extent_read_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let src = pattern(512, 512);
    let slide = write_pyramid(dir.path(), &SlideMeta::new("s", 512, 512), &src).unwrap();
    assert_eq!(slide.read_region(1, 0, 0, 512, 512).unwrap(), src);
}

#[test]
fn negative_origin_read_pads_top_left_quadrant() {
    let dir = tempfile::tempdir().unwrap();
    let src = pattern(512, 512);
    let slide = write_pyramid(dir.path(), &SlideMeta::new("s", 512, 512), &src).unwrap();
    let region = slide.read_region(1, -128, -128, 256, 256).unwrap();
    for y in 0..256 {
        for x in 0..256 {
            let expected = if x < 128 || y < 128 {
                PAD_RGB
            } else {
                *src.get_pixel(x - 128, y - 128)
            };
            assert_eq!(*region.get_pixel(x, y), expected, "({x},{y})");
        }
    }
}

#[test]
fn factor_four_read_matches_oracle_downsample() {
    let dir = tempfile::tempdir().unwrap();
    let src = pattern(1024, 1024);
    let slide = write_pyramid(dir.path(), &SlideMeta::new("s", 1024, 1024), &src).unwrap();
    let read = slide.read_region(4, 0, 0, 256, 256).unwrap();
    assert!(within_one(&read, &oracle_downsample(&src, 4)));
}

#[test]
fn generated_levels_match_oracle_downsample() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::new(
        4,
        1100,
        700,
        &[(TissueClass::ViableTumor, 0.3), (TissueClass::Cartilage, 0.3), (TissueClass::Blank, 0.4)],
    );
    spec.noise_epsilon = 0.2;
    let (slide, _) = generate_slide(&spec, dir.path(), "g").unwrap();
    let (level0, _) = render_slide(&spec).unwrap();
    assert_eq!(slide.read_level(1).unwrap(), level0);
    for f in [2, 4] {
        assert!(within_one(&slide.read_level(f).unwrap(), &oracle_downsample(&level0, f)), "level {f}");
    }
}

#[test]
fn manifest_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"slides":[{"id":"a","width":5,"height":5,"levels":[1,2,4]},
                             {"id":"b","width":5,"height":5,"levels":[1,2,4]}],
                  "cases":[{"id":"c","slides":["a","b"],"r_pr":null,"os_months":null,"os_event":false,
                            "pfs_months":null,"pfs_event":false,"metastasis_at_diagnosis":null}]}"#;
    std::fs::write(dir.path().join("manifest.json"), text).unwrap();
    let ds = load_manifest(dir.path()).unwrap();
    assert_eq!((ds.cases().len(), ds.slides().len()), (1, 2));
    let out = tempfile::tempdir().unwrap();
    ds.manifest().write(out.path()).unwrap();
    let again = load_manifest(&out.path().join("manifest.json")).unwrap();
    assert_eq!(again.manifest(), ds.manifest());
}

#[test]
fn split_flags_partition_cases() {
    let mut m = Manifest::default();
    m.slides.push(SlideMeta::new("s", 4, 4));
    let text = |i: usize, split: &str| {
        format!(
            r#"{{"id":"c{i}","slides":["s"],"r_pr":0.5,"os_months":1.0,"os_event":false,"pfs_months":1.0,
                "pfs_event":false,"metastasis_at_diagnosis":false,"split":"{split}"}}"#
        )
    };
    for i in 0..103 {
        let split = if i < 15 { "train" } else { "test" };
        m.cases.push(serde_json::from_str(&text(i, split)).unwrap());
    }
    let ds = necroscope::Dataset::new(".".into(), m).unwrap();
    use necroscope::slide_store::Split;
    assert_eq!(ds.cases_in(Split::Train).count(), 15);
    assert_eq!(ds.cases_in(Split::Test).count(), 88);
}

#[test]
fn interior_tile_has_no_padding() {
    let meta = SlideMeta::new("s", 4096, 4096);
    let tiles = schedule(4096, 4096).unwrap();
    let interior = tiles.iter().find(|t| t.col == 8 && t.row == 8).unwrap();
    for mag in Magnification::ALL {
        assert!(padding_map(&meta, interior, mag).iter().all(|p| !p));
    }
}

#[test]
fn origin_tile_geometry_and_padding() {
    let dir = tempfile::tempdir().unwrap();
    let src = pattern(2048, 2048);
    let slide = write_pyramid(dir.path(), &SlideMeta::new("s", 2048, 2048), &src).unwrap();
    let tile = schedule(2048, 2048).unwrap()[0];
    assert_eq!(field_origin(&tile, Magnification::X5), (-384, -384));
    let patch = extract(&slide, &tile).unwrap();
    let level4 = oracle_downsample(&src, 4);
    // The 5× field starts 96 level-4 pixels before the slide on each axis.
    for y in 0..256u32 {
        for x in 0..256u32 {
            let px = *patch.p5.get_pixel(x, y);
            if x < 96 || y < 96 {
                assert_eq!(px, PAD_RGB, "({x},{y})");
            } else {
                let expect = level4.get_pixel(x - 96, y - 96);
                assert!((0..3).all(|c| (px[c] as i32 - expect[c] as i32).abs() <= 1), "({x},{y})");
            }
        }
    }
    assert_eq!(patch.p20, image::imageops::crop_imm(&src, 0, 0, 256, 256).to_image());
}

#[test]
fn uniform_slide_gives_uniform_low_magnification() {
    let dir = tempfile::tempdir().unwrap();
    let color = Rgb([40, 90, 200]);
    let src = RgbImage::from_pixel(3000, 3000, color);
    let slide = write_pyramid(dir.path(), &SlideMeta::new("u", 3000, 3000), &src).unwrap();
    let tile = schedule(3000, 3000).unwrap()[5 * 12 + 5];
    let patch = extract(&slide, &tile).unwrap();
    assert!(patch.p5.pixels().all(|p| *p == color));
}

#[test]
fn fields_are_concentric() {
    let tile = schedule(5000, 5000).unwrap()[42];
    let (cx, cy) = tile.center();
    for mag in Magnification::ALL {
        let (ox, oy) = field_origin(&tile, mag);
        let side = mag.field_side() as i64;
        assert_eq!((ox * 2 + side, oy * 2 + side), (cx * 2, cy * 2));
    }
}

#[test]
fn synth_is_deterministic_on_disk() {
    let spec = SynthSpec::new(
        77,
        700,
        500,
        &[(TissueClass::ViableTumor, 0.5), (TissueClass::NecrosisWithBone, 0.5)],
    );
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_slide(&spec, a.path(), "x").unwrap();
    generate_slide(&spec, b.path(), "x").unwrap();
    let files = |root: &std::path::Path| {
        let mut v: Vec<_> = walk(root)
            .into_iter()
            .map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 1 + 6 + 2 + 1);
    assert!(fa == fb);
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_covers_every_pixel_once(w in 1u32..2000, h in 1u32..2000) {
        let tiles = schedule(w, h).unwrap();
        prop_assert_eq!(tiles.len() as u32, w.div_ceil(256) * h.div_ceil(256));
        let area: u64 = tiles.iter().map(|t| t.area()).sum();
        prop_assert_eq!(area, w as u64 * h as u64);
        for t in &tiles {
            prop_assert_eq!((t.x0, t.y0), (256 * t.col, 256 * t.row));
            prop_assert!(t.x0 + t.width <= w && t.y0 + t.height <= h);
        }
        // Row-major and disjoint: windows start on a strict 256 grid.
        for pair in tiles.windows(2) {
            prop_assert!((pair[0].row, pair[0].col) < (pair[1].row, pair[1].col));
        }
    }

    #[test]
    fn in_bounds_reads_round_trip(x in -300i64..600, y in -300i64..600, w in 1u32..400, h in 1u32..400) {
        prop_assume!(x + (w as i64) > 0 && y + (h as i64) > 0 && x < 520 && y < 300);
        let dir = tempfile::tempdir().unwrap();
        let src = pattern(520, 300);
        let slide = write_pyramid(dir.path(), &SlideMeta::new("s", 520, 300), &src).unwrap();
        let region = slide.read_region(1, x, y, w, h).unwrap();
        for ry in 0..h {
            for rx in 0..w {
                let (sx, sy) = (x + rx as i64, y + ry as i64);
                let expected = if sx >= 0 && sy >= 0 && sx < 520 && sy < 300 {
                    *src.get_pixel(sx as u32, sy as u32)
                } else {
                    PAD_RGB
                };
                prop_assert_eq!(*region.get_pixel(rx, ry), expected);
            }
        }
    }

    #[test]
    fn synthetic_class_areas_hit_targets(
        seed in any::<u64>(),
        w in 64u32..600,
        h in 64u32..600,
        weights in prop::collection::vec(0.0f64..1.0, 7),
        granularity in 4u32..128,
    ) {
        let total: f64 = weights.iter().sum();
        prop_assume!(total > 0.1);
        let fractions: Vec<(TissueClass, f64)> = TissueClass::TISSUE
            .iter()
            .zip(&weights)
            .map(|(c, w)| (*c, w / total))
            .collect();
        let mut spec = SynthSpec::new(seed, w, h, &fractions);
        spec.granularity = granularity;
        let mask = render_mask(&spec).unwrap();
        let n = (w * h) as f64;
        for (class, target) in fractions {
            let got = mask.codes().iter().filter(|&&c| c == class.code()).count() as f64 / n;
            prop_assert!((got - target).abs() <= 0.02, "{class}: {got} vs {target}");
        }
    }
}
