use super::{AnnotatedInstance, Corpus, CorpusError, Document, ModifierSchema, Result};
use std::collections::{BTreeMap, BTreeSet};

/// Union of two corpora. Modifiers shared by name must agree on labels and
/// default. Document and instance ids are prefixed with the source corpus
/// name; each document remembers which modifiers its source annotates.
pub fn merge_corpora(a: &Corpus, b: &Corpus) -> Result<Corpus> {
    let mut modifiers = a.schema.modifiers.clone();
    for mb in &b.schema.modifiers {
        match a.schema.get(&mb.name) {
            Some(ma) if ma.labels != mb.labels || ma.default_label != mb.default_label => {
                return Err(CorpusError::SchemaConflict {
                    modifier: mb.name.clone(),
                    labels_a: ma.labels.clone(),
                    labels_b: mb.labels.clone(),
                });
            }
            Some(_) => {}
            None => modifiers.push(mb.clone()),
        }
    }
    let schema = ModifierSchema::new(modifiers)?;
    let applicable: BTreeSet<String> = a
        .applicable_modifiers
        .union(&b.applicable_modifiers)
        .cloned()
        .collect();

    let (pa, pb) = if a.name == b.name {
        (format!("{}.a", a.name), format!("{}.b", b.name))
    } else {
        (a.name.clone(), b.name.clone())
    };

    let mut documents = BTreeMap::new();
    let mut document_applicable = BTreeMap::new();
    let mut instances = Vec::new();
    for (src, prefix) in [(a, &pa), (b, &pb)] {
        let ns = |id: &str| format!("{prefix}__{id}");
        for (id, doc) in &src.documents {
            let new_id = ns(id);
            let app = src
                .document_applicable
                .get(id)
                .unwrap_or(&src.applicable_modifiers);
            if *app != applicable {
                document_applicable.insert(new_id.clone(), app.clone());
            }
            documents.insert(new_id.clone(), Document::new(new_id, doc.text.clone()));
        }
        for inst in &src.instances {
            let app = src.applicable_for(inst);
            let mut mention = inst.mention.clone();
            mention.doc_id = ns(&mention.doc_id);
            instances.push(AnnotatedInstance {
                id: ns(&inst.id),
                mention,
                labels: inst
                    .labels
                    .iter()
                    .filter(|(m, _)| app.contains(*m))
                    .map(|(m, l)| (m.clone(), l.clone()))
                    .collect(),
            });
        }
    }
    let merged = Corpus {
        name: format!("{}+{}", a.name, b.name),
        schema,
        documents,
        instances,
        applicable_modifiers: applicable,
        document_applicable,
    };
    merged.validate()?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{generate_synthetic, SynthConfig};
    use crate::corpus::{ModifierDef, ModifierSchema};

    fn with_schema(name: &str, mods: Vec<ModifierDef>) -> Corpus {
        let mut c = crate::corpus::test_util::small_corpus(3);
        c.name = name.into();
        for inst in &mut c.instances {
            inst.labels.clear();
        }
        c.applicable_modifiers = mods.iter().map(|m| m.name.clone()).collect();
        c.schema = ModifierSchema::new(mods).unwrap();
        c
    }

    #[test]
    fn union_of_schemas() {
        let a = with_schema(
            "a",
            vec![ModifierDef::new("neg", &["no", "yes"], "no"), ModifierDef::new("sev", &["u", "s"], "u")],
        );
        let b = with_schema(
            "b",
            vec![
                ModifierDef::new("neg", &["no", "yes"], "no"),
                ModifierDef::new("doctime", &["before", "overlap", "after"], "overlap"),
            ],
        );
        let m = merge_corpora(&a, &b).unwrap();
        assert_eq!(m.schema.names().collect::<Vec<_>>(), vec!["neg", "sev", "doctime"]);
        assert_eq!(m.len(), 6);
        // documents from `a` do not annotate doctime
        let inst_a = m.instances.iter().find(|i| i.id.starts_with("a__")).unwrap();
        assert_eq!(m.resolved_label(inst_a, "doctime"), None);
        assert_eq!(m.resolved_label(inst_a, "sev"), Some("u"));
        let inst_b = m.instances.iter().find(|i| i.id.starts_with("b__")).unwrap();
        assert_eq!(m.resolved_label(inst_b, "sev"), None);
        assert_eq!(m.resolved_label(inst_b, "doctime"), Some("overlap"));
    }

    #[test]
    fn conflicting_labels_are_rejected() {
        let a = with_schema("a", vec![ModifierDef::new("neg", &["yes", "no"], "no")]);
        let b = with_schema("b", vec![ModifierDef::new("neg", &["true", "false"], "false")]);
        assert!(matches!(merge_corpora(&a, &b), Err(CorpusError::SchemaConflict { .. })));
    }

    #[test]
    fn share_like_and_oud_like_give_nine_modifiers() {
        let a = generate_synthetic(&SynthConfig::share_like(20), 1).unwrap().corpus;
        let b = generate_synthetic(&SynthConfig::oud_like(20), 2).unwrap().corpus;
        assert_eq!(a.schema.len(), 7);
        assert_eq!(b.schema.len(), 6);
        let m = merge_corpora(&a, &b).unwrap();
        assert_eq!(m.schema.len(), 9);
    }

    #[test]
    fn merge_is_commutative_on_label_multisets() {
        let a = generate_synthetic(&SynthConfig::share_like(30), 1).unwrap().corpus;
        let b = generate_synthetic(&SynthConfig::oud_like(30), 2).unwrap().corpus;
        let bag = |c: &Corpus| {
            let mut v: Vec<_> = c.instances.iter().map(|i| i.labels.clone()).collect();
            v.sort();
            v
        };
        assert_eq!(bag(&merge_corpora(&a, &b).unwrap()), bag(&merge_corpora(&b, &a).unwrap()));
    }
}
