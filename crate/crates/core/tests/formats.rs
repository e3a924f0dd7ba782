//! File formats against minimal readers written here, independent of the
//! library's own decoders.

use atom_core::checkpoint::{Buffer, Checkpoint, Header};
use atom_core::io::{read_ply, read_ppm, write_ply, write_ppm, Image, Mesh};
use atom_core::model::ModelConfig;
use atom_core::train::{TrainConfig, TrainState};
use proptest::prelude::*;

/// Binary little-endian PLY with the fixed layout the writer documents.
fn oracle_ply(bytes: &[u8]) -> (Vec<[f32; 3]>, Vec<[u8; 3]>, Vec<Vec<i32>>) {
    let end = bytes.windows(11).position(|w| w == b"end_header\n").expect("end_header") + 11;
    let header = std::str::from_utf8(&bytes[..end]).expect("ASCII header");
    let lines: Vec<&str> = header.lines().collect();
    assert_eq!(lines[0], "ply");
    assert_eq!(lines[1], "format binary_little_endian 1.0");
    let count = |what: &str| -> usize {
        let l = lines.iter().find(|l| l.starts_with(&format!("element {what} "))).expect("element line");
        l.rsplit(' ').next().unwrap().parse().unwrap()
    };
    let (nv, nf) = (count("vertex"), count("face"));
    let props: Vec<&str> = lines.iter().filter(|l| l.starts_with("property")).copied().collect();
    assert_eq!(
        props,
        [
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "property list uchar int vertex_indices",
        ]
    );
    let mut at = end;
    let mut take = |n: usize| {
        let s = &bytes[at..at + n];
        at += n;
        s
    };
    let mut pos = Vec::new();
    let mut col = Vec::new();
    for _ in 0..nv {
        let p: [f32; 3] = std::array::from_fn(|_| 0.0);
        let mut p = p;
        for v in &mut p {
            *v = f32::from_le_bytes(take(4).try_into().unwrap());
        }
        pos.push(p);
        let c = take(3);
        col.push([c[0], c[1], c[2]]);
    }
    let mut faces = Vec::new();
    for _ in 0..nf {
        let k = take(1)[0] as usize;
        faces.push((0..k).map(|_| i32::from_le_bytes(take(4).try_into().unwrap())).collect());
    }
    assert_eq!(at, bytes.len(), "trailing bytes");
    (pos, col, faces)
}

/// P6 with single-space/newline separators, maxval 255.
fn oracle_ppm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).unwrap().to_string());
    }
    at += 1;
    assert_eq!(fields[0], "P6");
    assert_eq!(fields[3], "255");
    let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    assert_eq!(bytes.len() - at, w * h * 3);
    (w, h, bytes[at..].to_vec())
}

fn mesh_strategy() -> impl Strategy<Value = Mesh> {
    (1usize..40).prop_flat_map(|nv| {
        (
            prop::collection::vec(prop::array::uniform3(any::<f32>().prop_filter("finite", |v| v.is_finite())), nv),
            prop::collection::vec(prop::array::uniform3(0.0f32..=1.0), nv),
            prop::collection::vec(prop::array::uniform3(0..nv as u32), 0..60),
        )
            .prop_map(|(positions, colors, faces)| Mesh { positions, colors, faces })
    })
}

fn image_strategy() -> impl Strategy<Value = Image> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f32..=1.0, w * h * 3).prop_map(move |d| Image::new(w, h, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn ply_round_trip(mesh in mesh_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        write_ply(&mesh, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (pos, col, faces) = oracle_ply(&bytes);
        prop_assert_eq!(pos.len(), mesh.positions.len());
        for (a, b) in pos.iter().zip(&mesh.positions) {
            prop_assert_eq!(a.map(f32::to_bits), b.map(f32::to_bits));
        }
        for (a, b) in col.iter().zip(&mesh.colors) {
            for k in 0..3 {
                prop_assert!((a[k] as f32 / 255.0 - b[k]).abs() <= 0.5 / 255.0 + 1e-6);
                prop_assert_eq!(a[k], (b[k] * 255.0).round() as u8);
            }
        }
        prop_assert_eq!(faces.len(), mesh.faces.len());
        for (a, b) in faces.iter().zip(&mesh.faces) {
            prop_assert_eq!(a.clone(), b.iter().map(|&i| i as i32).collect::<Vec<_>>());
        }
        // the library's reader closes the loop
        let back = read_ply(&path).unwrap();
        prop_assert_eq!(back.faces, mesh.faces.clone());
        prop_assert_eq!(
            back.positions.iter().map(|p| p.map(f32::to_bits)).collect::<Vec<_>>(),
            mesh.positions.iter().map(|p| p.map(f32::to_bits)).collect::<Vec<_>>()
        );
        for (a, b) in back.colors.iter().zip(&mesh.colors) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn ppm_round_trip(img in image_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.ppm");
        write_ppm(&img, &path).unwrap();
        let (w, h, px) = oracle_ppm(&std::fs::read(&path).unwrap());
        prop_assert_eq!((w, h), (img.width, img.height));
        for (a, b) in px.iter().zip(&img.data) {
            prop_assert_eq!(*a, (b * 255.0).round() as u8);
        }
        let back = read_ppm(&path).unwrap();
        prop_assert_eq!((back.width, back.height), (w, h));
        for (a, b) in back.data.iter().zip(&img.data) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0);
        }
        // re-encoding a decoded image is a fixed point
        let again = dir.path().join("j.ppm");
        write_ppm(&back, &again).unwrap();
        prop_assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_buffers_round_trip(bufs in prop::collection::vec(
        (prop::collection::vec(1usize..5, 0..3), any::<u32>()), 0..6)) {
        let buffers: Vec<Buffer> = bufs
            .iter()
            .enumerate()
            .map(|(i, (shape, seed))| {
                let n: usize = shape.iter().product();
                let data = (0..n as u32).map(|k| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(k) & 0x7f7f_ffff)).collect();
                Buffer { name: format!("param/b{i}"), shape: shape.clone(), data }
            })
            .collect();
        let ck = Checkpoint {
            header: Header {
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                state: TrainState::default(),
                adam_t: 7,
                config_hash: "0".into(),
            },
            buffers,
        };
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        prop_assert_eq!(back.header, ck.header.clone());
        prop_assert_eq!(back.buffers.len(), ck.buffers.len());
        for (a, b) in back.buffers.iter().zip(&ck.buffers) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(&a.shape, &b.shape);
            prop_assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}

#[test]
fn ply_fixed_examples() {
    let mesh = Mesh {
        positions: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        colors: vec![[0.5; 3]; 3],
        faces: vec![[0, 1, 2]],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ply");
    write_ply(&mesh, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    assert!(text.contains("element vertex 3\n"));
    assert!(text.contains("element face 1\n"));
    let (_, col, _) = oracle_ply(&bytes);
    assert_eq!(col, vec![[128, 128, 128]; 3]);
}

#[test]
fn ppm_fixed_examples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.ppm");
    write_ppm(&Image::filled(1, 1, [1.0; 3]), &p).unwrap();
    assert!(std::fs::read(&p).unwrap().ends_with(&[255, 255, 255]));
    write_ppm(&Image::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(), &p).unwrap();
    let (_, _, px) = oracle_ppm(&std::fs::read(&p).unwrap());
    assert_eq!(px, [0x00, 0x00, 0x00, 0xff, 0x00, 0x00]);
}

#[test]
fn io_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope").join("x.ply");
    let e = read_ply(&missing).unwrap_err().to_string();
    assert!(e.contains("nope"), "{e}");
    let e = write_ppm(&Image::filled(1, 1, [0.0; 3]), &missing).unwrap_err().to_string();
    assert!(e.contains("nope"), "{e}");
}
