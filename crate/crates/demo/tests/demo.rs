use scanreg_demo::Scan;

fn scan(points: usize) -> Scan {
    Scan::build(7, points, 16, 64, 0.0, 0.0).unwrap()
}

#[test]
fn empty_pixels_have_zero_range() {
    let s = scan(3000);
    let ranges = s.ranges();
    let valid = s.mask_at(0).unwrap().validity();
    assert_eq!(ranges.len(), 16 * 64);
    for (r, v) in ranges.iter().zip(&valid) {
        assert_eq!(*r > 0.0, *v);
    }
    let stats = s.stats();
    assert_eq!(stats[0], 3000);
    assert_eq!(stats[1] as usize, valid.iter().filter(|&&v| v).count());
    assert_eq!(stats[1] + stats[2] + stats[3] + stats[4], 3000);
}

#[test]
fn grids_must_tile_into_windows() {
    assert!(Scan::build(7, 100, 16, 62, 0.0, 0.0).is_err());
    assert!(Scan::build(7, 100, 0, 64, 0.0, 0.0).is_err());
}

#[test]
fn yaw_by_whole_columns_rolls_the_image() {
    let base = scan(3000).ranges();
    let k = 5;
    let turned = Scan::build(7, 3000, 16, 64, k as f64 * 360.0 / 64.0, 0.0)
        .unwrap()
        .ranges();
    let mut same = 0;
    for v in 0..16 {
        for u in 0..64 {
            let a = turned[v * 64 + u];
            let b = base[v * 64 + (u + k) % 64];
            if (a - b).abs() < 1e-3 {
                same += 1;
            }
        }
    }
    assert!(same as f64 >= 0.99 * 1024.0, "{same} of 1024 pixels match");
}

#[test]
fn mask_levels_match_a_direct_any_reduction() {
    let s = scan(800);
    let base = s.mask_at(0).unwrap().validity();
    for level in 1..=3 {
        let m = s.mask_at(level).unwrap();
        let (h, w) = (16 >> level, 64 >> level);
        assert_eq!((m.height, m.width), (h, w));
        let f = 1 << level;
        for v in 0..h {
            for u in 0..w {
                let any = (0..f).any(|a| (0..f).any(|b| base[(v * f + a) * 64 + u * f + b]));
                assert_eq!(m.is_valid(v * w + u), any);
            }
        }
    }
    assert!(s.mask_at(5).is_err());
}

#[test]
fn attention_is_a_distribution_over_valid_window_keys() {
    let s = scan(1500);
    let valid = s.mask_at(0).unwrap().validity();
    for shifted in [false, true] {
        for (v, u) in [(0, 0), (5, 17), (15, 63), (8, 1)] {
            let map = s.attention_map(v, u, shifted, 3).unwrap();
            let support: Vec<usize> = (0..map.len()).filter(|&i| map[i] > 0.0).collect();
            assert!(support.len() <= 16);
            assert!(support.iter().all(|&i| valid[i]));
            if !support.is_empty() {
                let total: f64 = map.iter().sum();
                assert!((total - 1.0).abs() < 1e-9, "{total}");
            }
            // Keys never come from more than a window's span away, allowing
            // for the horizontal wrap.
            for &i in &support {
                let dv = (i / 64).abs_diff(v);
                let du = (i % 64).abs_diff(u).min(64 - (i % 64).abs_diff(u));
                assert!(dv < 4 && du < 4, "key {i} for query ({v}, {u})");
            }
        }
    }
}

#[test]
fn shifted_windows_wrap_the_azimuth_seam() {
    let s = Scan::build(7, 20000, 16, 64, 0.0, 0.0).unwrap();
    let map = s.attention_map(4, 63, true, 3).unwrap();
    assert!((0..16).any(|v| map[v * 64] > 0.0 || map[v * 64 + 1] > 0.0));
    let plain = s.attention_map(4, 63, false, 3).unwrap();
    assert!((0..16).all(|v| plain[v * 64] == 0.0));
}

#[test]
fn an_empty_scan_attends_nowhere() {
    let s = scan(0);
    let map = s.attention_map(3, 3, true, 1).unwrap();
    assert!(map.iter().all(|&x| x == 0.0));
    assert!(s.attention_map(16, 0, false, 1).is_err());
}
