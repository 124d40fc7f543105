use igva::allocator::init_params;
use igva::fusion::AdapterParams;
use igva::io::checkpoint::Checkpoint;
use igva::io::config::RunConfig;
use igva::io::csv::{comparison_csv, group_labels, loss_trace_csv, weight_table_csv};
use igva::io::igt1::Archive;
use igva::training::{Comparison, Model, TaskSpec, TrainConfig, TrainReport};
use igva::{AllocatorConfig, Error, FormatErrorKind, WeightVector};

const DOCUMENTED: &str = r#"
seed = 0

[hierarchy]
layers = 8
groups = 4
patches = 16
feature_dim = 32

[task]
clusters = 3
sentence_dim = 48
readout_dim = 16
train_per_cluster = 128
heldout_per_cluster = 32
noise_scale = 0.01
contrast = 1.0
embedding_spread = 0.1
min_profile_gap = 0.5

[allocator]
hidden = 64
heads = 4
blocks = 4
ffn_mult = 4

[adapter]
dim = 64
hidden = 64
init = "teacher"
lr_scale = 0.01

[training]
lr = 3e-3
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
weight_decay = 1e-4
lambda = 0.02
steps = 2000
batch = 32
"#;

fn line_of_error(src: &str) -> usize {
    match RunConfig::parse(src) {
        Err(Error::ConfigAt { line, .. }) => line,
        other => panic!("expected a located config error, got {other:?}"),
    }
}

#[test]
fn empty_config_means_defaults() {
    let cfg = RunConfig::parse("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.task_spec(), TaskSpec::default());
    assert_eq!(cfg.train_config(), TrainConfig::default());
    assert_eq!(cfg.allocator_config(), AllocatorConfig::default());
}

#[test]
fn documented_defaults_match_built_in_defaults() {
    assert_eq!(RunConfig::parse(DOCUMENTED).unwrap(), RunConfig::default());
}

#[test]
fn sections_override_individual_fields() {
    let cfg = RunConfig::parse("seed = 9\n[training]\nsteps = 5\n[adapter]\ninit = \"random\"\n").unwrap();
    assert_eq!(cfg.seed, 9);
    let t = cfg.train_config();
    assert_eq!((t.steps, t.seed, t.batch), (5, 9, 32));
    assert_eq!(t.adapter_init, igva::training::AdapterInit::Random);
    assert_eq!(cfg.task_spec().seed, 9);
}

#[test]
fn negative_lambda_is_reported_at_its_line() {
    let src = "[training]\nsteps = 10\nlambda = -1\n";
    assert_eq!(line_of_error(src), 3);
}

#[test]
fn unknown_keys_are_rejected_with_line() {
    assert_eq!(line_of_error("seed = 1\n\n[training]\nlearning_rate = 0.1\n"), 4);
    assert_eq!(line_of_error("[optimizer]\nlr = 0.1\n"), 1);
}

#[test]
fn type_and_syntax_errors_carry_lines() {
    assert_eq!(line_of_error("[training]\n\nsteps = \"many\"\n"), 3);
    assert_eq!(line_of_error("[training]\nlr = \n"), 2);
    assert_eq!(line_of_error("[adapter]\ninit = \"pretrained\"\n"), 2);
}

#[test]
fn cross_field_constraints_are_located() {
    assert_eq!(line_of_error("[hierarchy]\nlayers = 8\ngroups = 3\n"), 3);
    assert_eq!(line_of_error("[hierarchy]\nlayers = 8\nfeature_dim = 4\n"), 3);
    assert_eq!(line_of_error("[allocator]\nhidden = 10\nheads = 4\n"), 3);
    assert_eq!(line_of_error("[training]\nbeta2 = 1.0\n"), 2);
    assert_eq!(line_of_error("[training]\nlr = 0.0\n"), 2);
}

#[test]
fn explicit_profiles_are_checked() {
    let ok = "[task]\nclusters = 2\nprofiles = [[0.7, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.7]]\n";
    let cfg = RunConfig::parse(ok).unwrap();
    assert_eq!(cfg.task_spec().profiles.unwrap()[1], vec![0.1, 0.1, 0.1, 0.7]);
    let off_simplex = "[task]\nclusters = 2\n\nprofiles = [[0.7, 0.1, 0.1, 0.2], [0.1, 0.1, 0.1, 0.7]]\n";
    assert_eq!(line_of_error(off_simplex), 4);
    let short = "[task]\nclusters = 3\nprofiles = [[0.7, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.7]]\n";
    assert_eq!(line_of_error(short), 3);
}

#[test]
fn unreadable_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(RunConfig::load(dir.path().join("nope.toml")), Err(Error::Config(_))));
}

fn small_checkpoint(seed: u64, profiles: Option<Vec<Vec<f64>>>) -> Checkpoint {
    let task = TaskSpec {
        clusters: 2,
        groups: 2,
        layers: 4,
        patches: 3,
        feature_dim: 5,
        sentence_dim: 6,
        adapter_dim: 4,
        adapter_hidden: 7,
        profiles,
        seed,
        ..TaskSpec::default()
    };
    let alloc = AllocatorConfig {
        groups: 2,
        feature_dim: 5,
        sentence_dim: 6,
        hidden: 8,
        heads: 2,
        blocks: 1,
        ffn_mult: 2,
    };
    let adapter_cfg = igva::fusion::AdapterConfig {
        feature_dim: 5,
        hidden: 7,
        out_dim: 4,
    };
    Checkpoint {
        task,
        model: Model {
            allocator: init_params(&alloc, 3).unwrap(),
            adapter: AdapterParams::init(&adapter_cfg, 4).unwrap(),
        },
    }
}

#[test]
fn checkpoint_round_trips_through_file() {
    let dir = tempfile::tempdir().unwrap();
    for ck in [
        small_checkpoint(u64::MAX - 12345, None),
        small_checkpoint(7, Some(vec![vec![0.9, 0.1], vec![0.25, 0.75]])),
    ] {
        let path = dir.path().join("ck.igt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(back.to_archive().unwrap().to_bytes(), bytes);
    }
}

#[test]
fn checkpoint_without_metadata_is_rejected() {
    let ck = small_checkpoint(1, None);
    let mut a = ck.to_archive().unwrap();
    a.remove("meta.task");
    match Checkpoint::from_archive(&a) {
        Err(Error::Format { kind, detail, .. }) => {
            assert_eq!(kind, FormatErrorKind::MissingTensor);
            assert!(detail.contains("meta.task"));
        }
        other => panic!("{other:?}"),
    }
    assert!(Checkpoint::from_archive(&Archive::new()).is_err());
}

#[test]
fn loss_trace_has_one_row_per_step() {
    let report = TrainReport {
        loss_trace: vec![1.5, 0.25, 1e-20],
        entropy_trace: vec![1.0, 0.5, 0.125],
        cluster_weights: vec![],
    };
    let csv = loss_trace_csv(&report);
    assert_eq!(csv, "step,loss,entropy\n0,1.5,1\n1,0.25,0.5\n2,0.00000000000000000001,0.125\n");
    assert!(!csv.contains('\r'));
}

#[test]
fn weight_table_uses_group_labels_and_six_decimals() {
    let rows = vec![
        WeightVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        WeightVector::uniform(4),
    ];
    let csv = weight_table_csv(&rows, &group_labels(4)).unwrap();
    assert_eq!(
        csv,
        "cluster,low,low-to-mid,mid-to-high,high\n\
         0,0.100000,0.200000,0.300000,0.400000\n\
         1,0.250000,0.250000,0.250000,0.250000\n"
    );
    assert_eq!(group_labels(3), ["g1", "g2", "g3"]);
    assert!(weight_table_csv(&rows, &group_labels(3)).is_err());
}

#[test]
fn comparison_rows_keep_order() {
    let rows = vec![
        Comparison {
            label: "Dynamic".into(),
            loss: 0.5,
        },
        Comparison {
            label: "Uniform".into(),
            loss: 2.0,
        },
    ];
    assert_eq!(comparison_csv(&rows), "config,heldout_loss\nDynamic,0.5\nUniform,2\n");
}
