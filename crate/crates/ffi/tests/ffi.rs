use std::ffi::{CStr, CString};
use std::ptr;

use diffgo::diffusion::{Architecture, DenoiserParams, Schedule};
use diffgo::goqos::MetricKind;
use diffgo::noise_codec::{project_exact, project_gd, reconstruct, GdConfig, SeedBasis, WeightVector};
use diffgo::numerics::gaussian_stream;
use diffgo::protocol::{encode_message, receive_pipeline, transmit_pipeline, TransmitConfig};
use diffgo::scenes::{generate_scene, SceneConfig};
use diffgo_ffi::*;

const DIM: usize = 1024;

fn last_error() -> String {
    let p = dg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_basis(seeds: &[u64]) -> *mut DgBasis {
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { dg_basis_new(seeds.as_ptr(), seeds.len(), DIM, &mut b) }, DgStatus::Ok);
    b
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

struct Shared {
    model: DenoiserParams,
    basis: SeedBasis,
    sched: Schedule,
    wire: Vec<u8>,
    expected: Vec<f32>,
}

fn shared() -> Shared {
    let sched = Schedule::linear(10, 1e-4, 0.3).unwrap();
    let arch = Architecture { hidden: 16, time_dim: 8, ..Architecture::reference(DIM, 10) };
    let model = DenoiserParams::init(arch, 5).unwrap();
    let basis = SeedBasis::build(&(1..=16).collect::<Vec<u64>>(), DIM).unwrap();
    let scene = generate_scene(42, &SceneConfig::default());
    let metric = MetricKind::Rmse.with_config(SceneConfig::default());
    let cfg = TransmitConfig::new(f64::INFINITY, vec![4], 9);
    let out = transmit_pipeline(&scene, &model, &basis, &sched, &metric, &cfg).unwrap();
    let expected = receive_pipeline(&out.message, &model, &basis, &sched).unwrap();
    assert_eq!(bits(&expected), bits(&out.accepted_candidate));
    Shared { wire: encode_message(&out.message), model, basis, sched, expected }
}

fn checkpoint(model: &DenoiserParams) -> Vec<u8> {
    let mut buf = Vec::new();
    model.write_checkpoint(&mut buf).unwrap();
    buf
}

#[test]
fn gaussian_stream_matches_core() {
    let mut out = vec![0.0f32; 100];
    assert_eq!(unsafe { dg_gaussian_stream(7, out.as_mut_ptr(), out.len()) }, DgStatus::Ok);
    assert_eq!(bits(&out), bits(&gaussian_stream(7, 100).unwrap()));
}

#[test]
fn basis_projection_and_reconstruction_match_core() {
    let seeds: Vec<u64> = (100..108).collect();
    let core = SeedBasis::build(&seeds, DIM).unwrap();
    let b = new_basis(&seeds);
    let (mut n, mut dim, mut fp) = (0usize, 0usize, 0u64);
    unsafe {
        assert_eq!(dg_basis_shape(b, &mut n, &mut dim), DgStatus::Ok);
        assert_eq!(dg_basis_fingerprint(b, &mut fp), DgStatus::Ok);
    }
    assert_eq!((n, dim, fp), (8, DIM, core.fingerprint()));

    let x = gaussian_stream(3, DIM).unwrap();
    let mut w = vec![0.0f32; n];
    for (use_gd, want) in [
        (false, project_exact(&x, &core).unwrap()),
        (true, project_gd(&x, &core, &GdConfig::default()).unwrap()),
    ] {
        let status = unsafe { dg_project(b, x.as_ptr(), x.len(), use_gd, w.as_mut_ptr(), w.len()) };
        assert_eq!(status, DgStatus::Ok);
        assert_eq!(bits(&w), bits(&want.to_dense()));
    }

    let idx = [1u32, 4, 6];
    let vals = [0.5f32, -1.25, 2.0];
    let mut img = vec![0.0f32; DIM];
    let status = unsafe { dg_reconstruct(b, idx.as_ptr(), vals.as_ptr(), 3, img.as_mut_ptr(), img.len()) };
    assert_eq!(status, DgStatus::Ok);
    let w = WeightVector::from_entries(8, idx.into_iter().zip(vals).collect()).unwrap();
    assert_eq!(bits(&img), bits(&reconstruct(&w, &core).unwrap()));
    unsafe { dg_basis_free(b) };
}

#[test]
fn receive_matches_core_pipeline() {
    let s = shared();
    let ckpt = checkpoint(&s.model);
    let seeds: Vec<u64> = (1..=16).collect();
    let basis = new_basis(&seeds);
    let (mut model, mut msg) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(dg_model_from_bytes(ckpt.as_ptr(), ckpt.len(), &mut model), DgStatus::Ok);
        assert_eq!(dg_message_decode(s.wire.as_ptr(), s.wire.len(), &mut msg), DgStatus::Ok);

        let (mut fp, mut k, mut px) = (0u64, 0usize, 0usize);
        assert_eq!(dg_message_info(msg, &mut fp, &mut k, &mut px), DgStatus::Ok);
        assert_eq!((fp, k, px), (s.basis.fingerprint(), 4, DIM));

        let mut written = 0usize;
        assert_eq!(dg_message_encode(msg, ptr::null_mut(), 0, &mut written), DgStatus::Ok);
        let mut again = vec![0u8; written];
        assert_eq!(dg_message_encode(msg, again.as_mut_ptr(), again.len(), &mut written), DgStatus::Ok);
        assert_eq!(again, s.wire);
        assert_eq!(dg_message_encode(msg, again.as_mut_ptr(), 3, &mut written), DgStatus::BufferTooSmall);

        let sched = DgSchedule { steps: s.sched.steps(), beta_start: 1e-4, beta_end: 0.3 };
        let mut img = vec![0.0f32; DIM];
        assert_eq!(dg_receive(msg, model, basis, sched, img.as_mut_ptr(), img.len()), DgStatus::Ok);
        assert_eq!(bits(&img), bits(&s.expected));

        let mut small = vec![0.0f32; 10];
        let status = dg_receive(msg, model, basis, sched, small.as_mut_ptr(), small.len());
        assert_eq!(status, DgStatus::BufferTooSmall);
        assert!(last_error().contains("needed"));

        dg_message_free(msg);
        dg_model_free(model);
        dg_basis_free(basis);
    }
}

#[test]
fn model_loads_from_path() {
    let s = shared();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dgm");
    std::fs::write(&path, checkpoint(&s.model)).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dg_model_load(c.as_ptr(), &mut model) }, DgStatus::Ok);
    assert!(!model.is_null());
    unsafe { dg_model_free(model) };

    let missing = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dg_model_load(missing.as_ptr(), &mut model) }, DgStatus::Io);
    assert!(last_error().contains("absent"));
}

#[test]
fn errors_map_to_status_codes() {
    let s = shared();
    let mut msg = ptr::null_mut();
    let mut bad = s.wire.clone();
    bad[10] ^= 0x40;
    assert_eq!(unsafe { dg_message_decode(bad.as_ptr(), bad.len(), &mut msg) }, DgStatus::CorruptMessage);
    assert!(msg.is_null());

    let mut model = ptr::null_mut();
    let junk = [1u8, 2, 3, 4];
    assert_eq!(unsafe { dg_model_from_bytes(junk.as_ptr(), junk.len(), &mut model) }, DgStatus::Checkpoint);

    let foreign_seeds: Vec<u64> = (500..516).collect();
    let foreign = new_basis(&foreign_seeds);
    let ckpt = checkpoint(&s.model);
    let mut img = vec![0.0f32; DIM];
    unsafe {
        assert_eq!(dg_model_from_bytes(ckpt.as_ptr(), ckpt.len(), &mut model), DgStatus::Ok);
        assert_eq!(dg_message_decode(s.wire.as_ptr(), s.wire.len(), &mut msg), DgStatus::Ok);
        let sched = DgSchedule { steps: 10, beta_start: 1e-4, beta_end: 0.3 };
        let status = dg_receive(msg, model, foreign, sched, img.as_mut_ptr(), img.len());
        assert_eq!(status, DgStatus::BasisMismatch);
        dg_message_free(msg);
        dg_model_free(model);
        dg_basis_free(foreign);
    }

    let dup = [1u64, 1];
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { dg_basis_new(dup.as_ptr(), 2, DIM, &mut b) }, DgStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_rejected() {
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(dg_basis_new(ptr::null(), 3, DIM, &mut out), DgStatus::NullPointer);
        assert!(last_error().contains("seeds"));
        assert_eq!(dg_message_decode(ptr::null(), 5, ptr::null_mut()), DgStatus::NullPointer);
        assert_eq!(dg_gaussian_stream(1, ptr::null_mut(), 4), DgStatus::NullPointer);
        let mut one = [0.0f32];
        assert_eq!(dg_gaussian_stream(1, one.as_mut_ptr(), 1), DgStatus::Ok);
        assert!(dg_last_error_message().is_null());
        let mut fp = 0u64;
        assert_eq!(dg_basis_fingerprint(ptr::null(), &mut fp), DgStatus::NullPointer);
        dg_basis_free(ptr::null_mut());
        dg_model_free(ptr::null_mut());
        dg_message_free(ptr::null_mut());
    }
}

#[test]
fn default_schedule_and_version() {
    let s = dg_schedule_default();
    assert_eq!(s.steps, Schedule::default_linear().steps());
    let v = unsafe { CStr::from_ptr(dg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/diffgo.h")).unwrap();
    for name in [
        "DG_STATUS_OK = 0",
        "typedef struct DgBasis DgBasis",
        "dg_last_error_message(void)",
        "dg_basis_new(",
        "dg_project(",
        "dg_reconstruct(",
        "dg_model_load(",
        "dg_message_decode(",
        "dg_receive(",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
