//! Every builtin template against its published wording, with `\n` already
//! turned into a newline and placeholders filled by hand.

use s3_core::prompting::{builtin_templates, Bindings, Field, Placeholder, Role};

fn render(dataset: &str, role: Role, pairs: &[(Placeholder, &str)]) -> String {
    let b: Bindings = pairs.iter().map(|(k, v)| (*k, v.to_string())).collect();
    builtin_templates(dataset).unwrap().templates[&role].render(&b).unwrap()
}

fn label_word(dataset: &str, role: Role, label: &str) -> String {
    builtin_templates(dataset).unwrap().templates[&role].label_word(label).to_string()
}

const X: Placeholder = Placeholder::X;
const Y: Placeholder = Placeholder::Y;
const PREMISE: Placeholder = Placeholder::Field(Field::Premise);
const QUESTION: Placeholder = Placeholder::Field(Field::Question);
const HYPOTHESIS: Placeholder = Placeholder::Field(Field::Hypothesis);
const CONTEXT: Placeholder = Placeholder::Field(Field::Context);
const ANSWER: Placeholder = Placeholder::Field(Field::Answer);

#[test]
fn imdb() {
    assert_eq!(
        render("imdb", Role::Ration, &[(X, "3"), (Y, "positive")]),
        "Imagine you are watching a movie; consider 3 reasons that may lead to positive impression of the movie."
    );
    assert_eq!(
        render(
            "imdb",
            Role::Query1,
            &[(X, "great acting, intriguing plot, and beautiful cinematography"), (Y, "positive")]
        ),
        "Now imagine that you just watched a movie that has great acting, intriguing plot, and beautiful \
         cinematography. Now you should write a positive review about this movie."
    );
    assert_eq!(
        render("imdb", Role::Mis1, &[(X, "The movie is great"), (Y, "positive")]),
        "Write a positive movie similar to: \n The movie is great"
    );
}

#[test]
fn qnli() {
    let w = label_word("qnli", Role::Query2, "not_entailment");
    assert_eq!(w, "not in");
    assert_eq!(
        render("qnli", Role::Query2, &[(X, "P."), (Y, &w)]),
        "Given an information paragraph: P. \n Please ask a question that has answers not in the information paragraph"
    );
    let w = label_word("qnli", Role::Mis2, "entailment");
    assert_eq!(w, "in");
    assert_eq!(
        render("qnli", Role::Mis2, &[(PREMISE, "P."), (QUESTION, "Q?"), (Y, &w)]),
        "Given a premise: P. \n And here is a question: Q? that the answer of question is in the premise.\n\
         Please write another question similar to the given question and have answers in the premise."
    );
}

#[test]
fn rte() {
    let w = label_word("rte", Role::Query2, "entailment");
    assert_eq!(w, "correct");
    assert_eq!(
        render("rte", Role::Query2, &[(X, "P"), (Y, &w)]),
        "P \nBased on the above description, the following sentence is definitely correct:"
    );
    let w = label_word("rte", Role::Mis2, "not_entailment");
    assert_eq!(w, "wrong");
    assert_eq!(
        render("rte", Role::Mis2, &[(PREMISE, "P."), (HYPOTHESIS, "H."), (Y, &w)]),
        "P. \nBased on the above description, the following sentence: H. is definitely wrong. Now write a \
         sentence similar to the given sentence and is definitely wrong based on the given description."
    );
}

#[test]
fn adqa() {
    let t = builtin_templates("adqa").unwrap();
    assert!(t.labels.is_empty());
    assert_eq!(t.templates.keys().copied().collect::<Vec<_>>(), vec![Role::Query2, Role::Mis2]);
    assert_eq!(
        render("adqa", Role::Query2, &[(CONTEXT, "C."), (ANSWER, "A")]),
        "Given a context: C. \nA is the answer to the following question:"
    );
    assert_eq!(
        render("adqa", Role::Mis2, &[(CONTEXT, "C."), (ANSWER, "A"), (QUESTION, "Q?")]),
        "Given a context: C. \nA is the answer to: Q?.\nA question that has the same answer in the context is:"
    );
}

#[test]
fn role_sets_and_unknown_name() {
    let roles = |n: &str| builtin_templates(n).unwrap().templates.keys().copied().collect::<Vec<_>>();
    assert_eq!(roles("imdb"), vec![Role::Ration, Role::Query1, Role::Mis1]);
    assert_eq!(roles("qnli"), vec![Role::Query2, Role::Mis2]);
    assert_eq!(roles("rte"), vec![Role::Query2, Role::Mis2]);
    assert!(builtin_templates("sst2").is_err());
}
