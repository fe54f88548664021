use msunet::dataio::*;
use msunet::error::Category;

const GOLDEN_VOLUME: &[u8] = include_bytes!("data/golden.msuv");
const GOLDEN_MASK: &[u8] = include_bytes!("data/golden.msum");

fn byte_sum(b: &[u8]) -> u32 {
    b.iter().fold(0u32, |a, &x| a.wrapping_add(x as u32))
}

#[test]
fn golden_files_have_known_size_and_checksum() {
    assert_eq!((GOLDEN_VOLUME.len(), byte_sum(GOLDEN_VOLUME)), (120, 7554));
    assert_eq!((GOLDEN_MASK.len(), byte_sum(GOLDEN_MASK)), (48, 372));
}

#[test]
fn golden_volume_decodes_and_reencodes() {
    let v = decode_volume(GOLDEN_VOLUME).unwrap();
    assert_eq!(v.dims(), [3, 2, 2, 2]);
    for t in 0..2 {
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..3 {
                    let want = (x + 10 * y + 100 * z + 1000 * t) as f64 + 0.25;
                    assert_eq!(v.get(x, y, z, t), want);
                }
            }
        }
    }
    assert_eq!(v.voxels()[1], 1.25);
    assert_eq!(v.voxels()[3], 10.25);
    assert_eq!(v.voxels()[6], 100.25);
    assert_eq!(encode_volume(&v).unwrap(), GOLDEN_VOLUME);
}

#[test]
fn golden_mask_decodes_and_reencodes() {
    let m = decode_mask(GOLDEN_MASK).unwrap();
    assert_eq!(m.dims(), [3, 2, 2, 2]);
    for t in 0..2 {
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..3 {
                    assert_eq!(m.get(x, y, z, t) as usize, (x + y + z + t) % 4);
                }
            }
        }
    }
    assert_eq!(m.histogram(), [5, 5, 7, 7]);
    assert_eq!(encode_mask(&m).unwrap(), GOLDEN_MASK);
}

#[test]
fn golden_files_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.msuv");
    std::fs::write(&p, GOLDEN_VOLUME).unwrap();
    let v = read_volume(&p).unwrap();
    let q = dir.path().join("h.msuv");
    write_volume(&q, &v).unwrap();
    assert_eq!(std::fs::read(q).unwrap(), GOLDEN_VOLUME);
    let wrong = decode_mask(GOLDEN_VOLUME).unwrap_err();
    assert_eq!(wrong.category(), Category::Format);
}

#[test]
fn phantom_is_reproducible() {
    let cfg = PhantomConfig { dims: [48, 48, 3, 6], num_cases: 2, seed: 9, ..PhantomConfig::default() };
    let a = generate_phantom(&cfg).unwrap();
    let b = generate_phantom(&cfg).unwrap();
    for ((va, ma), (vb, mb)) in a.iter().zip(&b) {
        assert_eq!(encode_volume(va).unwrap(), encode_volume(vb).unwrap());
        assert_eq!(ma.labels(), mb.labels());
    }
    assert_ne!(a[0].1.labels(), a[1].1.labels());
    let h = a[0].1.histogram();
    assert!(h.iter().all(|&c| c > 0), "{h:?}");
}
