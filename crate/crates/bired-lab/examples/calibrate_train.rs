use bired_lab::lm::train::{train, TrainOptions};
use bired_lab::lm::*;
use bired_lab::vocab::Vocab;
use bired_lab::world::*;
use std::time::Instant;

fn score(model: &TinyLm, vocab: &Vocab, prompt: &str, answer: &str) -> f64 {
    let mut p = vec![vocab.bos()];
    p.extend(vocab.tokenize(prompt));
    let a = vocab.tokenize(answer);
    logprob_continuation(model, &p, &a, &[]).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);

    let world = gen_world(0, 120, 2, 50).unwrap();
    let vocab = vocab_for_world(&world);
    let lines = render_corpus(&world, 1).unwrap();
    let corpus: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| {
            let mut t = vec![vocab.bos()];
            t.extend(vocab.tokenize(l));
            t
        })
        .collect();
    println!("vocab {} corpus {} lines, max len {}", vocab.len(), corpus.len(),
             corpus.iter().map(|l| l.len()).max().unwrap());

    let cfg = LMConfig::default();
    let t0 = Instant::now();
    let opts = TrainOptions { steps, lr, batch, seed: 0, log_every: 250 };
    let model = train(&cfg, &vocab, &corpus, &opts, |s, l, g| println!("  step {s}: loss {l:.4} gnorm {g:.3}")).unwrap();
    println!("trained {steps} steps lr {lr} batch {batch} in {:.1}s", t0.elapsed().as_secs_f64());

    // forward recall: o beats all same-relation foil objects (excluding s's own objects)
    let mut fwd_ok = 0usize;
    let mut fwd_n = 0usize;
    let mut inv_ok = 0usize;
    let mut inv_n = 0usize;
    let mut judge_ok = 0usize;
    let mut judge_n = 0usize;
    for schema in &world.relations {
        let facts = world.facts_of(&schema.id);
        let objects = world.objects_of(&schema.id);
        let subjects = world.subjects_of(&schema.id);
        for t in facts.iter() {
            // forward
            let stmt = render_statement(t, Direction::Forward, 0, &world).unwrap();
            let own: std::collections::HashSet<&str> = facts.iter()
                .filter(|f| f.subject == t.subject).map(|f| f.object.as_str()).collect();
            let target = score(&model, &vocab, &stmt.prompt, &t.object);
            let best_foil = objects.iter()
                .filter(|o| !own.contains(**o))
                .map(|o| score(&model, &vocab, &stmt.prompt, o))
                .fold(f64::NEG_INFINITY, f64::max);
            fwd_n += 1;
            if target > best_foil { fwd_ok += 1; }
            // inverse (QA classes only make unique sense, but measure all)
            let inv = render_statement(t, Direction::Inverse, 0, &world).unwrap();
            let own_subj: std::collections::HashSet<&str> = facts.iter()
                .filter(|f| f.object == t.object).map(|f| f.subject.as_str()).collect();
            let target = score(&model, &vocab, &inv.prompt, &t.subject);
            let best_foil = subjects.iter()
                .filter(|s| !own_subj.contains(**s))
                .map(|s| score(&model, &vocab, &inv.prompt, s))
                .fold(f64::NEG_INFINITY, f64::max);
            inv_n += 1;
            if target > best_foil { inv_ok += 1; }
            // judgment yes
            let q = render_judgment(&t.object, &t.relation, &t.subject, &world).unwrap();
            let yes = score(&model, &vocab, &q, "yes");
            let no = score(&model, &vocab, &q, "no");
            judge_n += 1;
            if yes > no { judge_ok += 1; }
            // judgment no (foil = some other subject not related to o)
            if let Some(foil) = subjects.iter().find(|s| !own_subj.contains(**s) && **s != t.subject) {
                let q = render_judgment(&t.object, &t.relation, foil, &world).unwrap();
                let yes = score(&model, &vocab, &q, "yes");
                let no = score(&model, &vocab, &q, "no");
                judge_n += 1;
                if no > yes { judge_ok += 1; }
            }
        }
    }
    println!("forward recall {:.1}% ({fwd_ok}/{fwd_n})", 100.0 * fwd_ok as f64 / fwd_n as f64);
    println!("inverse recall {:.1}% ({inv_ok}/{inv_n})", 100.0 * inv_ok as f64 / inv_n as f64);
    println!("judgment acc   {:.1}% ({judge_ok}/{judge_n})", 100.0 * judge_ok as f64 / judge_n as f64);
}
