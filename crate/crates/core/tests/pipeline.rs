use std::fs::File;
use std::io::Write;

use nextutt::baseline::evaluate_table;
use nextutt::corpus::{
    build_vocabulary, parse_pair_file, parse_ranking_file, DialogueExample, PairFileOptions, RankingGroup,
    RankingLayout,
};
use nextutt::embed::{combine_embeddings, coverage, load_vectors, train_word2vec, VectorFormat, Word2vecConfig};
use nextutt::esim::{load_checkpoint, save_checkpoint, score_groups, train, EsimConfig, EsimModel, TrainOptions};
use nextutt::metrics::evaluate;

const TRAIN: &str = "Context,Utterance,Label
hello there __eou__ __eot__ how are you __eou__,fine thanks,1
hello there __eou__ __eot__ how are you __eou__,the printer is broken,0
my disk is full __eou__ __eot__,run du to find big files,1
my disk is full __eou__ __eot__,hello there,0
how do i install vim __eou__,sudo apt install vim,1
how do i install vim __eou__,fine thanks,0
";

const TEST: &str = "Context,Ground Truth Utterance,Distractor_0,Distractor_1
my disk is full __eou__,run du to find big files,hello there,fine thanks
how do i install vim __eou__ __eot__,sudo apt install vim,the printer is broken,hello
";

const GLOVE: &str = "hello 0.1 0.2 0.3
there 0.0 0.5 -0.1
disk 0.4 0.4 0.1
vim -0.3 0.2 0.9
install -0.2 0.1 0.8
";

#[test]
fn files_to_scores() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| {
        let p = dir.path().join(name);
        File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    };
    let (train_path, test_path, glove_path) = (write("train.csv", TRAIN), write("test.csv", TEST), write("glove.txt", GLOVE));

    let train_set: Vec<DialogueExample> =
        parse_pair_file(&train_path, PairFileOptions::default()).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(train_set.len(), 6);
    let test: Vec<RankingGroup> = parse_ranking_file(&test_path, RankingLayout::Grouped, PairFileOptions::default())
        .unwrap()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(test.len(), 2);
    assert_eq!(test[0].labels(), [1, 0, 0]);

    let vocab = build_vocabulary(&train_set, 1);
    let (glove, report) = load_vectors(&glove_path, VectorFormat::GloveText).unwrap();
    assert_eq!(report.body_lines, 5);
    let sentences: Vec<Vec<String>> = train_set.iter().flat_map(|e| [e.context.clone(), e.response.clone()]).collect();
    let w2v = train_word2vec(&sentences, &Word2vecConfig { dim: 4, min_count: 1, epochs: 2, ..Default::default() }).unwrap();
    let combined = combine_embeddings(&glove, &w2v, &vocab).unwrap();
    assert_eq!(combined.dim(), 7);

    let cov_glove = coverage(&glove, &train_set).unwrap();
    let cov_combined = coverage(&combined, &train_set).unwrap();
    assert!(cov_combined.pct_unique_tokens_covered > cov_glove.pct_unique_tokens_covered);
    assert!(evaluate_table(&test, &combined, false).is_ok());

    let cfg = EsimConfig { word_dim: 7, char_hidden: 4, ctx_hidden: 6, mlp_hidden: 8, batch_size: 4, epochs: 2, ..Default::default() };
    let model = EsimModel::new(cfg, vocab, &combined).unwrap();
    let mut lines = Vec::new();
    let out = train(model, &train_set, &test, &TrainOptions::default(), &mut |l| lines.push(l.to_string())).unwrap();
    assert_eq!(out.steps, 4);
    assert!(lines.iter().all(|l| l.contains("valid_r@1=0.") || l.contains("valid_r@1=1.")), "{lines:?}");

    let ckpt = dir.path().join("model");
    save_checkpoint(&out.best, &ckpt).unwrap();
    let back = load_checkpoint(&ckpt).unwrap();
    let a = score_groups(&out.best, &test).unwrap();
    let b = score_groups(&back, &test).unwrap();
    assert_eq!(a, b);
    let report = evaluate(&b, false).unwrap();
    assert_eq!(report.n_groups_scored, 2);
    assert_eq!(Some(report.r_at_1), out.best_valid_r_at_1);
}
