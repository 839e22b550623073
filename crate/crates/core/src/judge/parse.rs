use serde_json::Value;

use super::{JudgeError, TaskKind};

/// Scored candidate: id and 1-based assigned level.
pub type Scored = (String, u32);

/// First complete JSON value starting at the first `{` or `[`.
fn first_json(text: &str) -> Option<Value> {
    let start = text.find(['{', '['])?;
    serde_json::Deserializer::from_str(&text[start..])
        .into_iter::<Value>()
        .next()?
        .ok()
}

/// Removes `//` and `/* */` comments outside string literals.
fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    let mut in_string = false;
    while let Some(c) = chars.next() {
        if in_string {
            out.push(c);
            if c == '\\' {
                if let Some(n) = chars.next() {
                    out.push(n);
                }
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match (c, chars.peek()) {
            ('"', _) => {
                in_string = true;
                out.push(c);
            }
            ('/', Some('/')) => {
                for n in chars.by_ref() {
                    if n == '\n' {
                        out.push('\n');
                        break;
                    }
                }
            }
            ('/', Some('*')) => {
                chars.next();
                let mut prev = ' ';
                for n in chars.by_ref() {
                    if prev == '*' && n == '/' {
                        break;
                    }
                    prev = n;
                }
            }
            _ => out.push(c),
        }
    }
    out
}

fn int_value(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn criterion_score(item: &Value, key: &str) -> Option<i64> {
    let v = item.get(key)?;
    int_value(v.get("score").unwrap_or(v))
}

/// Maps one evaluation object to a level for the task's rubric.
fn level_of(kind: TaskKind, item: &Value) -> Option<u32> {
    match kind {
        TaskKind::BinaryVerification => match criterion_score(item, "accuracy")? {
            -1 => Some(1),
            1 => Some(2),
            0 => Some(3),
            _ => None,
        },
        TaskKind::MathNoRef | TaskKind::MathWithRef => match criterion_score(item, "accuracy")? {
            s @ -1..=1 => Some((s + 2) as u32),
            _ => None,
        },
        TaskKind::MtbenchStyle => match criterion_score(item, "overall")? {
            s @ 1..=5 => Some(s as u32),
            _ => None,
        },
        TaskKind::TldrStyle => {
            let mut sum = 0;
            for key in ["relevance", "consistency", "fluency", "coherence"] {
                let s = criterion_score(item, key)?;
                if !(1..=5).contains(&s) {
                    return None;
                }
                sum += s;
            }
            // Mean of four scores rounded half up: floor((2 * sum + 4) / 8).
            Some(((2 * sum + 4) / 8) as u32)
        }
    }
}

fn position(item: &Value, n: usize) -> Option<usize> {
    let id = item.get("model_id")?;
    let p = int_value(id)?;
    (1..=n as i64).contains(&p).then(|| p as usize - 1)
}

/// Evaluation objects recovered one by one from text that does not parse as
/// a whole.
fn salvage_items(text: &str) -> Vec<Value> {
    let mut items = Vec::new();
    let mut from = 0;
    while let Some(off) = text[from..].find("\"model_id\"") {
        let at = from + off;
        if let Some(open) = text[..at].rfind('{') {
            if let Some(Ok(v)) = serde_json::Deserializer::from_str(&text[open..])
                .into_iter::<Value>()
                .next()
            {
                items.push(v);
            }
        }
        from = at + 1;
    }
    items
}

/// Extracts `(candidate id, level)` pairs from a judge response. `order[i]`
/// is the candidate shown as number `i + 1`. Ids outside `order` are never
/// produced.
pub fn parse_evaluations(
    kind: TaskKind,
    response: &str,
    order: &[String],
) -> Result<Vec<Scored>, JudgeError> {
    let n = order.len();
    let root = first_json(response).or_else(|| first_json(&strip_comments(response)));
    let (items, whole) = match root.as_ref().map(|r| r.get("evaluations").unwrap_or(r)) {
        Some(Value::Array(items)) => (items.clone(), true),
        _ => (salvage_items(&strip_comments(response)), false),
    };
    let mut levels: Vec<Option<u32>> = vec![None; n];
    let mut problems = Vec::new();
    for item in &items {
        let Some(p) = position(item, n) else {
            problems.push(format!("unrecognised model_id in {item}"));
            continue;
        };
        match level_of(kind, item) {
            Some(l) if levels[p].is_none() => levels[p] = Some(l),
            Some(_) => {}
            None => problems.push(format!("candidate #{}: missing or invalid score", p + 1)),
        }
    }
    let scored: Vec<Scored> = levels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (order[i].clone(), l)))
        .collect();
    if !whole || !problems.is_empty() {
        let mut message = if whole {
            String::new()
        } else {
            "response is not a JSON object with an evaluations list".to_string()
        };
        for p in problems {
            if !message.is_empty() {
                message.push_str("; ");
            }
            message.push_str(&p);
        }
        return Err(JudgeError::MalformedResponse {
            message,
            salvaged: scored,
        });
    }
    if let Some(i) = levels.iter().position(Option::is_none) {
        return Err(JudgeError::MissingCandidate {
            id: order[i].clone(),
            parsed: scored,
        });
    }
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("cand{i}")).collect()
    }

    fn math(entries: &[(&str, i64)]) -> String {
        let items: Vec<String> = entries
            .iter()
            .map(|(id, s)| {
                format!(r#"{{"model_id": "{id}", "accuracy": {{"reasoning": "r", "score": {s}}}}}"#)
            })
            .collect();
        format!("{{\"evaluations\": [{}]}}", items.join(","))
    }

    #[test]
    fn well_formed_three() {
        let text = format!("Sure!\n```json\n{}\n```", math(&[("1", 1), ("2", 0), ("3", -1)]));
        let got = parse_evaluations(TaskKind::MathWithRef, &text, &ids(3)).unwrap();
        assert_eq!(
            got,
            vec![("cand1".into(), 3), ("cand2".into(), 2), ("cand3".into(), 1)]
        );
    }

    #[test]
    fn missing_candidate_is_named() {
        let text = math(&[("1", 1), ("3", 1)]);
        match parse_evaluations(TaskKind::MathNoRef, &text, &ids(3)) {
            Err(JudgeError::MissingCandidate { id, parsed }) => {
                assert_eq!(id, "cand2");
                assert_eq!(parsed.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn binary_maps_unsure_to_abstain() {
        let text = r#"{"evaluations": [
            {"model_id": 1, "consistency": {"score": 5}, "accuracy": {"score": 1}},
            {"model_id": 2, "consistency": {"score": 2}, "accuracy": {"score": -1}},
            {"model_id": "3", "accuracy": {"score": "0"}}]}"#;
        let got = parse_evaluations(TaskKind::BinaryVerification, text, &ids(3)).unwrap();
        let levels: Vec<u32> = got.iter().map(|x| x.1).collect();
        assert_eq!(levels, vec![2, 1, 3]);
    }

    #[test]
    fn likert_tasks() {
        let text = r#"{"evaluations": [{"model_id": "1", "overall": {"reasoning": "ok", "score": 4}}]}"#;
        assert_eq!(
            parse_evaluations(TaskKind::MtbenchStyle, text, &ids(1)).unwrap(),
            vec![("cand1".into(), 4)]
        );
        let text = r#"{
            "evaluations": [
            // Evaluation for Candidate #1
            {
                "model_id": "1", // Corresponds to Candidate #1
                "relevance": {"reasoning": "a // b", "score": 4},
                "consistency": {"reasoning": "", "score": 5},
                "fluency": {"reasoning": "", "score": 4},
                "coherence": {"reasoning": "", "score": 5}
            }
            /* trailing example */
            ]
        }"#;
        assert_eq!(
            parse_evaluations(TaskKind::TldrStyle, text, &ids(1)).unwrap(),
            vec![("cand1".into(), 5)]
        );
    }

    #[test]
    fn truncated_response_is_salvaged() {
        let full = math(&[("1", 1), ("2", -1), ("3", 0)]);
        let cut = &full[..full.rfind("\"model_id\": \"3\"").unwrap() + 12];
        match parse_evaluations(TaskKind::MathNoRef, cut, &ids(3)) {
            Err(JudgeError::MalformedResponse { salvaged, .. }) => {
                assert_eq!(salvaged, vec![("cand1".into(), 3), ("cand2".into(), 1)]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_evaluations(TaskKind::MathNoRef, "no json here", &ids(2)),
            Err(JudgeError::MalformedResponse { .. })
        ));
    }

    #[test]
    fn out_of_range_scores_and_ids() {
        let text = math(&[("1", 2), ("2", 1)]);
        assert!(matches!(
            parse_evaluations(TaskKind::MathNoRef, &text, &ids(2)),
            Err(JudgeError::MalformedResponse { .. })
        ));
        let text = math(&[("1", 1), ("7", 1)]);
        match parse_evaluations(TaskKind::MathNoRef, &text, &ids(1)) {
            Err(JudgeError::MalformedResponse { salvaged, .. }) => {
                assert_eq!(salvaged, vec![("cand1".into(), 3)])
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn never_emits_unknown_ids(text in ".{0,300}", n in 1usize..5) {
            let order = ids(n);
            let out = match parse_evaluations(TaskKind::MathNoRef, &text, &order) {
                Ok(v) => v,
                Err(JudgeError::MalformedResponse { salvaged, .. }) => salvaged,
                Err(JudgeError::MissingCandidate { parsed, .. }) => parsed,
                Err(e) => panic!("{e:?}"),
            };
            for (id, _) in out {
                prop_assert!(order.contains(&id));
            }
        }

        #[test]
        fn generated_responses_round_trip(scores in proptest::collection::vec(-1i64..=1, 1..6)) {
            let entries: Vec<(String, i64)> = scores.iter().enumerate().map(|(i, s)| ((i + 1).to_string(), *s)).collect();
            let refs: Vec<(&str, i64)> = entries.iter().map(|(a, b)| (a.as_str(), *b)).collect();
            let got = parse_evaluations(TaskKind::MathNoRef, &math(&refs), &ids(scores.len())).unwrap();
            for (i, (_, l)) in got.iter().enumerate() {
                prop_assert_eq!(*l as i64, scores[i] + 2);
            }
        }
    }
}
