use candle_core::{DType, Device, Tensor};
use edgeguide::models::{
    estimate_flops, pyramid_dims, shape_trace, Student, StudentConfig, StudentKind, Teacher, TeacherConfig,
    TeacherKind, DEFAULT_CHANNELS,
};
use edgeguide::nn::{count_vars, Conv2d, ConvSpec, Linear, ParamInit, Parameterized};
use edgeguide::trace::count_macs;
use proptest::prelude::*;

const TINY: [usize; 4] = [8, 16, 32, 64];

fn student(channels: [usize; 4]) -> Student {
    Student::new(
        &StudentConfig {
            channels,
            ..StudentConfig::default()
        },
        DType::F32,
        &Device::Cpu,
    )
    .unwrap()
}

fn input(b: usize, h: usize, w: usize) -> Tensor {
    Tensor::randn(0f32, 1.0, (b, 3, h, w), &Device::Cpu).unwrap()
}

#[test]
fn default_pyramid_at_352() {
    let s = student(DEFAULT_CHANNELS);
    let (p, preds) = s.forward(&input(1, 352, 352)).unwrap();
    let dims: Vec<Vec<usize>> = p.scales.iter().map(|t| t.dims().to_vec()).collect();
    assert_eq!(
        dims,
        vec![vec![1, 64, 88, 88], vec![1, 128, 44, 44], vec![1, 320, 22, 22], vec![1, 512, 11, 11]]
    );
    assert_eq!(preds.heads(), 2);
    assert!(preds.logits.iter().all(|l| l.dims() == [1, 1, 352, 352]));
}

#[test]
fn tiny_pyramid_at_64() {
    let (p, _) = student(TINY).forward(&input(2, 64, 64)).unwrap();
    let dims: Vec<Vec<usize>> = p.scales.iter().map(|t| t.dims().to_vec()).collect();
    assert_eq!(
        dims,
        vec![vec![2, 8, 16, 16], vec![2, 16, 8, 8], vec![2, 32, 4, 4], vec![2, 64, 2, 2]]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pyramid_follows_the_ceil_rule(h in 32usize..100, w in 32usize..100) {
        let (p, preds) = student(TINY).forward(&input(1, h, w)).unwrap();
        for (i, t) in p.scales.iter().enumerate() {
            let (_, _, sh, sw) = t.dims4().unwrap();
            prop_assert_eq!((sh, sw), pyramid_dims(h, w, i));
            let stride = 1 << (i + 2);
            prop_assert_eq!((sh, sw), (h.div_ceil(stride), w.div_ceil(stride)));
        }
        prop_assert!(preds.logits.iter().all(|l| l.dims() == [1, 1, h, w]));
    }
}

#[test]
fn inputs_below_the_coarsest_stride_are_rejected() {
    assert!(student(TINY).forward(&input(1, 31, 64)).is_err());
}

#[test]
fn head_count_is_configurable() {
    let s = Student::new(
        &StudentConfig {
            channels: TINY,
            heads: 3,
            ..StudentConfig::default()
        },
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    let (_, preds) = s.forward(&input(1, 64, 64)).unwrap();
    assert_eq!(preds.heads(), 3);
    assert_eq!(s.predict(&input(1, 64, 64)).unwrap().dims(), [1, 1, 64, 64]);
}

#[test]
fn tiny_parameter_count_by_hand() {
    // backbone: stem 7x7 + refine 3x3, then down 3x3 + refine 3x3 per stage
    let backbone = (3 * 8 * 49 + 8) + (8 * 8 * 9 + 8)
        + (8 * 16 * 9 + 16) + (16 * 16 * 9 + 16)
        + (16 * 32 * 9 + 32) + (32 * 32 * 9 + 32)
        + (32 * 64 * 9 + 64) + (64 * 64 * 9 + 64);
    // decoder width 32: four 1x1 laterals, three 3x3 smoothers, two 1x1 heads
    let decoder = (9 + 17 + 33 + 65) * 32 + 3 * (32 * 32 * 9 + 32) + 2 * 33;
    assert_eq!(backbone + decoder, 106_346);
    assert_eq!(student(TINY).trainable_count(), 106_346);
}

#[test]
fn linear_counts() {
    let mut p = ParamInit::trainable(0, DType::F64, &Device::Cpu);
    let l = Linear::new(&mut p, "l", 10, 5).unwrap();
    let x = Tensor::zeros((1, 10), DType::F64, &Device::Cpu).unwrap();
    let (_, macs) = count_macs(|| l.forward(&x)).unwrap();
    assert_eq!(2 * macs, 100);
    assert_eq!(count_vars(&p.into_vars()), 55);
}

#[test]
fn pointwise_conv_flops() {
    let mut p = ParamInit::trainable(0, DType::F64, &Device::Cpu);
    let c = Conv2d::new(&mut p, "c", ConvSpec::new(8, 8, 1)).unwrap();
    let x = Tensor::zeros((1, 8, 4, 4), DType::F64, &Device::Cpu).unwrap();
    let (_, macs) = count_macs(|| c.forward(&x)).unwrap();
    assert_eq!(2 * macs, 2048);
}

#[test]
fn flops_scale_with_area_and_trace_covers_every_layer() {
    let s = student(TINY);
    let f64_ = estimate_flops(&s, 64, 64).unwrap();
    let f128 = estimate_flops(&s, 128, 128).unwrap();
    assert_eq!(f128, 4 * f64_);
    let trace = shape_trace(&s, 64, 64).unwrap();
    // 8 backbone convs, 4 laterals, 3 smoothers, 2 heads
    assert_eq!(trace.len(), 17);
    assert_eq!(2 * trace.iter().map(|e| e.macs).sum::<u64>(), f64_);
}

#[test]
fn same_seed_same_student() {
    let a = student(TINY);
    let b = student(TINY);
    let x = input(1, 64, 64);
    let (la, lb) = (a.predict(&x).unwrap(), b.predict(&x).unwrap());
    assert_eq!(
        la.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        lb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    );
}

#[test]
fn stub_teacher_contract() {
    let t = Teacher::new(&TeacherConfig::default(), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(t.kind(), TeacherKind::Stub);
    assert_eq!(t.trainable_count(), 0);
    let x = input(2, 64, 80);
    let z = t.encode(&x).unwrap().z;
    assert_eq!(z.dims(), [2, 256, 16, 16]);
    let again = t.encode(&x).unwrap().z;
    assert_eq!(
        z.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        again.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    );
    let digest = t.digest().unwrap();
    let other = Teacher::new(&TeacherConfig::default(), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(digest, other.digest().unwrap());
}

#[test]
fn teacher_output_carries_no_gradient() {
    let t = Teacher::new(&TeacherConfig::default(), DType::F32, &Device::Cpu).unwrap();
    let x = candle_core::Var::from_tensor(&input(1, 32, 32)).unwrap();
    let z = t.encode(x.as_tensor()).unwrap().z;
    let grads = z.sum_all().unwrap().backward().unwrap();
    assert!(grads.get(x.as_tensor()).is_none());
}

#[test]
fn adapters_without_weights_fall_back() {
    let t = Teacher::new(
        &TeacherConfig {
            kind: TeacherKind::SamAdapter,
            ..TeacherConfig::default()
        },
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    assert_eq!(t.kind(), TeacherKind::Stub);
    let s = Student::new(
        &StudentConfig {
            kind: StudentKind::PvtB0Adapter,
            ..StudentConfig::default()
        },
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    assert_eq!(s.kind(), StudentKind::Tiny);
}

#[test]
fn adapters_with_a_missing_file_name_the_path() {
    let cfg = StudentConfig {
        kind: StudentKind::PvtB0Adapter,
        weights: Some("/nonexistent/pvt_v2_b0.safetensors".into()),
        ..StudentConfig::default()
    };
    let err = Student::new(&cfg, DType::F32, &Device::Cpu).err().unwrap().to_string();
    assert!(err.contains("/nonexistent/pvt_v2_b0.safetensors"), "{err}");
    let cfg = TeacherConfig {
        kind: TeacherKind::SamAdapter,
        weights: Some("/nonexistent/sam.safetensors".into()),
        ..TeacherConfig::default()
    };
    let err = Teacher::new(&cfg, DType::F32, &Device::Cpu).err().unwrap().to_string();
    assert!(err.contains("/nonexistent/sam.safetensors"), "{err}");
}

#[test]
fn pvt_skeleton_pyramid() {
    let s = Student::skeleton(
        &StudentConfig {
            kind: StudentKind::PvtB0Adapter,
            ..StudentConfig::default()
        },
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    let (p, preds) = s.forward(&input(1, 64, 64)).unwrap();
    let dims: Vec<Vec<usize>> = p.scales.iter().map(|t| t.dims().to_vec()).collect();
    assert_eq!(
        dims,
        vec![vec![1, 32, 16, 16], vec![1, 64, 8, 8], vec![1, 160, 4, 4], vec![1, 256, 2, 2]]
    );
    assert_eq!(preds.heads(), 2);
}
