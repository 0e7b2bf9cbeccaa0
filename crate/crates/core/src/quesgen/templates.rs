//! Question templates. Each family yields the question, its ground truth
//! computed straight from the scene graph, and a fine and a coarse program.
//!
//! All random draws happen before any program text is built, so the
//! visual-pointer switch never changes which questions are asked.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::QuestionType;
use crate::dsl::quote;
use crate::lexicon::Lexicon;
use crate::query::{NO, YES};
use crate::scene::{SceneGraph, SceneObject};

pub(crate) struct Built {
    pub question: String,
    pub answer: String,
    pub fine: String,
    pub coarse: String,
}

pub(crate) struct Ctx<'a> {
    pub scene: &'a SceneGraph,
    pub lex: &'a Lexicon,
    pub pointer: bool,
}

fn an(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn yes_no(b: bool) -> String {
    if b { YES } else { NO }.to_string()
}

impl Ctx<'_> {
    fn name_counts(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for o in &self.scene.objects {
            *m.entry(o.name.as_str()).or_default() += 1;
        }
        m
    }

    fn unique_by_name(&self) -> Vec<&SceneObject> {
        let counts = self.name_counts();
        self.scene
            .objects
            .iter()
            .filter(|o| counts[o.name.as_str()] == 1)
            .collect()
    }

    fn unique_by_category(&self) -> Vec<(&SceneObject, &str)> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for o in &self.scene.objects {
            if let Some(c) = self.lex.category_of(&o.name) {
                *counts.entry(c).or_default() += 1;
            }
        }
        self.scene
            .objects
            .iter()
            .filter_map(|o| {
                let c = self.lex.category_of(&o.name)?;
                (counts[c] == 1).then_some((o, c))
            })
            .collect()
    }

    /// (family, value) pairs an object carries, in family order.
    fn values<'o>(&self, o: &'o SceneObject) -> Vec<(&str, &'o str)> {
        let mut v: Vec<(&str, &str)> = o
            .attributes
            .iter()
            .filter_map(|a| Some((self.lex.family_of(a)?, a.as_str())))
            .collect();
        v.sort();
        v
    }

    fn other_value<'l>(&'l self, family: &str, not: &str, rng: &mut ChaCha8Rng) -> Option<&'l str> {
        let others: Vec<&String> = self.lex.family_values(family).iter().filter(|v| *v != not).collect();
        others.choose(rng).map(|s| s.as_str())
    }

    /// Sub-question text for `simple_query`, with or without the center word.
    fn pointed(&self, with: String, without: String) -> String {
        if self.pointer {
            with
        } else {
            without
        }
    }
}

fn find_line(var: &str, name: &str) -> String {
    format!("{var} = image.find({})\n", quote(name))
}

fn if_else(cond: &str, then: &str, otherwise: &str) -> String {
    format!("if {cond}:\n    return {then}\nelse:\n    return {otherwise}\n")
}

pub(crate) fn build(kind: QuestionType, cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    match kind {
        QuestionType::AttrQuery => attr_query(cx, rng),
        QuestionType::MaterialQuery => material_query(cx, rng),
        QuestionType::VerifyAttr => verify_attr(cx, rng),
        QuestionType::ChooseAttr => choose_attr(cx, rng),
        QuestionType::ChooseName => choose_name(cx, rng),
        QuestionType::NameQuery => name_query(cx, rng),
        QuestionType::Exists => exists(cx, rng),
        QuestionType::BothExist => both_exist(cx, rng),
        QuestionType::TwoHop => two_hop(cx, rng),
        QuestionType::AndVerify => and_verify(cx, rng),
        QuestionType::OrVerify => or_verify(cx, rng),
        QuestionType::SameColor => same_color(cx, rng),
        QuestionType::ExistAttr => exist_attr(cx, rng),
    }
}

const MATERIAL: &str = "material";
const COLOR: &str = "color";

fn attr_query(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let t = *cx.unique_by_name().choose(rng)?;
    let vals: Vec<_> = cx.values(t).into_iter().filter(|(f, _)| *f != MATERIAL).collect();
    let &(fam, value) = vals.choose(rng)?;
    let n = &t.name;
    let sub = cx.pointed(format!("What {fam} is this {n}?"), format!("What {fam} is this?"));
    let program = format!("{}return objs[0].simple_query({})\n", find_line("objs", n), quote(&sub));
    Some(Built {
        question: format!("What {fam} is the {n}?"),
        answer: value.to_string(),
        fine: program.clone(),
        coarse: program,
    })
}

fn material_query(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let candidates: Vec<_> = cx
        .unique_by_name()
        .into_iter()
        .filter_map(|o| {
            cx.values(o)
                .into_iter()
                .find(|(f, _)| *f == MATERIAL)
                .map(|(_, v)| (o, v))
        })
        .collect();
    let &(t, value) = candidates.choose(rng)?;
    let n = &t.name;
    let sub = cx.pointed(format!("What is this {n} made of?"), "What is this made of?".into());
    let program = format!("{}return objs[0].simple_query({})\n", find_line("objs", n), quote(&sub));
    Some(Built {
        question: format!("What is the {n} made of?"),
        answer: value.to_string(),
        fine: program.clone(),
        coarse: program,
    })
}

/// A target, one of its families, and a value of that family that is the
/// true one with probability one half.
fn probe<'s>(cx: &'s Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<(&'s SceneObject, &'s str, bool)> {
    let t = *cx.unique_by_name().choose(rng)?;
    let &(fam, value) = cx.values(t).choose(rng)?;
    let truth = rng.gen_bool(0.5);
    let asked = if truth { value } else { cx.other_value(fam, value, rng)? };
    Some((t, asked, truth))
}

fn verify_attr(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let (t, a, truth) = probe(cx, rng)?;
    let n = &t.name;
    let sub = cx.pointed(format!("Is this {n} {a}?"), format!("Is this {a}?"));
    Some(Built {
        question: format!("Is the {n} {a}?"),
        answer: yes_no(truth),
        fine: format!(
            "{}return objs[0].verify_property({}, {})\n",
            find_line("objs", n),
            quote(n),
            quote(a)
        ),
        coarse: format!("{}return objs[0].simple_query({})\n", find_line("objs", n), quote(&sub)),
    })
}

fn choose_attr(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let t = *cx.unique_by_name().choose(rng)?;
    let &(fam, value) = cx.values(t).choose(rng)?;
    let other = cx.other_value(fam, value, rng)?;
    let mut opts = [value, other];
    opts.shuffle(rng);
    let n = &t.name;
    let [x, y] = opts;
    let sub = cx.pointed(format!("Is this {n} {x} or {y}?"), format!("Is this {x} or {y}?"));
    Some(Built {
        question: format!("Is the {n} {x} or {y}?"),
        answer: value.to_string(),
        fine: format!(
            "{}return objs[0].best_text_match([{}, {}])\n",
            find_line("objs", n),
            quote(x),
            quote(y)
        ),
        coarse: format!("{}return objs[0].simple_query({})\n", find_line("objs", n), quote(&sub)),
    })
}

fn choose_name(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let candidates: Vec<_> = cx
        .unique_by_category()
        .into_iter()
        .filter(|(_, c)| cx.lex.category_nouns(c).len() >= 2)
        .collect();
    let &(t, cat) = candidates.choose(rng)?;
    let others: Vec<&String> = cx.lex.category_nouns(cat).iter().filter(|n| **n != t.name).collect();
    let other = others.choose(rng)?.as_str();
    let mut opts = [t.name.as_str(), other];
    opts.shuffle(rng);
    let [x, y] = opts;
    let sub = cx.pointed(
        format!("Is this {cat} {} {x} or {} {y}?", an(x), an(y)),
        format!("Is this {} {x} or {} {y}?", an(x), an(y)),
    );
    Some(Built {
        question: format!("Is the {cat} {} {x} or {} {y}?", an(x), an(y)),
        answer: t.name.clone(),
        fine: format!(
            "{}return objs[0].best_text_match([{}, {}])\n",
            find_line("objs", cat),
            quote(x),
            quote(y)
        ),
        coarse: format!(
            "{}return objs[0].simple_query({})\n",
            find_line("objs", cat),
            quote(&sub)
        ),
    })
}

fn name_query(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let &(t, cat) = cx.unique_by_category().choose(rng)?;
    let sub = cx.pointed(format!("What kind of {cat} is this?"), "What is this?".into());
    let program = format!(
        "{}return objs[0].simple_query({})\n",
        find_line("objs", cat),
        quote(&sub)
    );
    Some(Built {
        question: format!("What kind of {cat} is in the image?"),
        answer: t.name.clone(),
        fine: program.clone(),
        coarse: program,
    })
}

/// A noun present in the scene with probability one half, else an absent one.
fn some_noun<'l>(cx: &'l Ctx<'_>, rng: &mut ChaCha8Rng, present_p: f64) -> Option<(&'l str, bool)> {
    let present: Vec<&str> = cx.scene.objects.iter().map(|o| o.name.as_str()).collect();
    let absent: Vec<&str> = cx
        .lex
        .nouns()
        .iter()
        .map(String::as_str)
        .filter(|n| !present.contains(n))
        .collect();
    let want_present = rng.gen_bool(present_p);
    let pool = if want_present && !present.is_empty() || absent.is_empty() {
        &present
    } else {
        &absent
    };
    let n = *pool.choose(rng)?;
    Some((n, present.contains(&n)))
}

fn exists_program(var: &str, n: &str) -> String {
    format!("{var} = image.exists({})\n", quote(n))
}

fn exists(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let (n, here) = some_noun(cx, rng, 0.5)?;
    Some(Built {
        question: format!("Is there {} {n} in the image?", an(n)),
        answer: yes_no(here),
        fine: format!("return image.exists({})\n", quote(n)),
        coarse: format!(
            "{}if len(objs) == 0:\n    return \"no\"\nreturn \"yes\"\n",
            find_line("objs", n)
        ),
    })
}

fn both_exist(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let (x, hx) = some_noun(cx, rng, 0.7)?;
    let (y, hy) = some_noun(cx, rng, 0.7)?;
    if x == y {
        return None;
    }
    Some(Built {
        question: format!("Are there both {} {x} and {} {y} in the image?", an(x), an(y)),
        answer: yes_no(hx && hy),
        fine: format!(
            "{}{}{}",
            exists_program("a", x),
            exists_program("b", y),
            if_else("a and b", "\"yes\"", "\"no\"")
        ),
        coarse: format!(
            "{}{}if len(a) == 0 or len(b) == 0:\n    return \"no\"\nreturn \"yes\"\n",
            find_line("a", x),
            find_line("b", y)
        ),
    })
}

fn two_hop(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let t = *cx.unique_by_name().choose(rng)?;
    let vals = cx.values(t);
    let &(cond_fam, cond_value) = vals.choose(rng)?;
    let asked: Vec<_> = vals.iter().filter(|(f, _)| *f != cond_fam && *f != MATERIAL).collect();
    let &&(ask_fam, ask_value) = asked.choose(rng)?;
    let truth = rng.gen_bool(0.5);
    let a = if truth {
        cond_value
    } else {
        cx.other_value(cond_fam, cond_value, rng)?
    };
    let n = &t.name;
    let query = cx.pointed(
        format!("What {ask_fam} is this {n}?"),
        format!("What {ask_fam} is this?"),
    );
    let check = cx.pointed(format!("Is this {n} {a}?"), format!("Is this {a}?"));
    let then = format!("objs[0].simple_query({})", quote(&query));
    Some(Built {
        question: format!("If the {n} is {a}, what {ask_fam} is it?"),
        answer: if truth { ask_value.to_string() } else { "none".into() },
        fine: format!(
            "{}{}",
            find_line("objs", n),
            if_else(
                &format!("objs[0].verify_property({}, {})", quote(n), quote(a)),
                &then,
                "\"none\""
            )
        ),
        coarse: format!(
            "{}{}",
            find_line("objs", n),
            if_else(
                &format!("objs[0].simple_query({}) == \"yes\"", quote(&check)),
                &then,
                "\"none\""
            )
        ),
    })
}

/// A target with two probed values from different families, each true with
/// probability `p`.
fn double_probe<'s>(cx: &'s Ctx<'_>, rng: &mut ChaCha8Rng, p: f64) -> Option<(&'s SceneObject, [(&'s str, bool); 2])> {
    let t = *cx.unique_by_name().choose(rng)?;
    let mut vals = cx.values(t);
    if vals.len() < 2 {
        return None;
    }
    vals.shuffle(rng);
    let mut out = [("", false); 2];
    for (slot, &(fam, value)) in out.iter_mut().zip(&vals) {
        let truth = rng.gen_bool(p);
        *slot = (if truth { value } else { cx.other_value(fam, value, rng)? }, truth);
    }
    Some((t, out))
}

fn and_verify(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let (t, [(a, ta), (b, tb)]) = double_probe(cx, rng, 0.7)?;
    let n = &t.name;
    let sq = |v: &str| {
        format!(
            "objs[0].simple_query({}) == \"yes\"",
            quote(&cx.pointed(format!("Is this {n} {v}?"), format!("Is this {v}?")))
        )
    };
    Some(Built {
        question: format!("Is the {n} both {a} and {b}?"),
        answer: yes_no(ta && tb),
        fine: format!(
            "{}x = objs[0].verify_property({}, {})\ny = objs[0].verify_property({}, {})\n{}",
            find_line("objs", n),
            quote(n),
            quote(a),
            quote(n),
            quote(b),
            if_else("x and y", "\"yes\"", "\"no\"")
        ),
        coarse: format!(
            "{}{}",
            find_line("objs", n),
            if_else(&format!("{} and {}", sq(a), sq(b)), "\"yes\"", "\"no\"")
        ),
    })
}

fn or_verify(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let (t, [(a, ta), (b, tb)]) = double_probe(cx, rng, 0.3)?;
    let n = &t.name;
    let vp = |v: &str| format!("objs[0].verify_property({}, {})", quote(n), quote(v));
    let sq = |v: &str| {
        format!(
            "objs[0].simple_query({}) == \"yes\"",
            quote(&cx.pointed(format!("Is this {n} {v}?"), format!("Is this {v}?")))
        )
    };
    Some(Built {
        question: format!("Is the {n} either {a} or {b}?"),
        answer: yes_no(ta || tb),
        fine: format!(
            "{}{}",
            find_line("objs", n),
            if_else(&format!("{} or {}", vp(a), vp(b)), "\"yes\"", "\"no\"")
        ),
        coarse: format!(
            "{}{}",
            find_line("objs", n),
            if_else(&format!("{} or {}", sq(a), sq(b)), "\"yes\"", "\"no\"")
        ),
    })
}

fn same_color(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let unique = cx.unique_by_name();
    let pair: Vec<&&SceneObject> = unique.choose_multiple(rng, 2).collect();
    let [t1, t2] = pair[..] else {
        return None;
    };
    let value = |o: &SceneObject| {
        cx.values(o)
            .into_iter()
            .find(|(f, _)| *f == COLOR)
            .map(|(_, v)| v.to_string())
    };
    let (c1, c2) = (value(t1)?, value(t2)?);
    let (n1, n2) = (&t1.name, &t2.name);
    let sub = |n: &str| quote(&cx.pointed(format!("What color is this {n}?"), "What color is this?".into()));
    let program = format!(
        "{}{}ca = a[0].simple_query({})\ncb = b[0].simple_query({})\n{}",
        find_line("a", n1),
        find_line("b", n2),
        sub(n1),
        sub(n2),
        if_else("ca == cb", "\"yes\"", "\"no\"")
    );
    Some(Built {
        question: format!("Do the {n1} and the {n2} have the same color?"),
        answer: yes_no(c1 == c2),
        fine: program.clone(),
        coarse: program,
    })
}

fn exist_attr(cx: &Ctx<'_>, rng: &mut ChaCha8Rng) -> Option<Built> {
    let counts = cx.name_counts();
    let (n, _) = some_noun(cx, rng, 0.7)?;
    if counts.get(n).copied().unwrap_or(0) > 1 {
        return None;
    }
    let target = cx.scene.objects.iter().find(|o| o.name == n);
    let values = cx.lex.family_values(COLOR);
    let a = match target {
        Some(t) => {
            let own = cx.values(t).into_iter().find(|(f, _)| *f == COLOR).map(|(_, v)| v)?;
            if rng.gen_bool(0.5) {
                own
            } else {
                cx.other_value(COLOR, own, rng)?
            }
        }
        None => values.choose(rng)?.as_str(),
    };
    let truth = target.is_some_and(|t| t.has_attribute(a));
    let sub = cx.pointed(format!("Is this {n} {a}?"), format!("Is this {a}?"));
    let guard = format!("{}if len(objs) == 0:\n    return \"no\"\n", find_line("objs", n));
    Some(Built {
        question: format!("Is there {} {a} {n} in the image?", an(a)),
        answer: yes_no(truth),
        fine: format!("{guard}return objs[0].verify_property({}, {})\n", quote(n), quote(a)),
        coarse: format!("{guard}return objs[0].simple_query({})\n", quote(&sub)),
    })
}
