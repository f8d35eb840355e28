//! Structured-output shapes and their validators.

use std::collections::BTreeMap;

use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum Schema {
    String {
        non_empty: bool,
    },
    /// A string or `null`.
    OptionalString,
    Integer,
    Number,
    Bool,
    Array {
        items: Box<Schema>,
        min_items: usize,
    },
    Object {
        fields: Vec<Field>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: &'static str,
    pub schema: Schema,
    pub required: bool,
}

fn req(name: &'static str, schema: Schema) -> Field {
    Field {
        name,
        schema,
        required: true,
    }
}

fn opt(name: &'static str, schema: Schema) -> Field {
    Field {
        name,
        schema,
        required: false,
    }
}

fn text() -> Schema {
    Schema::String { non_empty: true }
}

fn array(items: Schema) -> Schema {
    Schema::Array {
        items: Box::new(items),
        min_items: 0,
    }
}

fn object(fields: Vec<Field>) -> Schema {
    Schema::Object { fields }
}

impl Schema {
    pub fn validate(&self, value: &Value) -> Result<(), String> {
        self.validate_at(value, "$")
    }

    fn validate_at(&self, value: &Value, path: &str) -> Result<(), String> {
        match self {
            Schema::String { non_empty } => match value.as_str() {
                Some(s) if *non_empty && s.trim().is_empty() => {
                    Err(format!("{path}: expected a non-empty string"))
                }
                Some(_) => Ok(()),
                None => Err(format!("{path}: expected a string")),
            },
            Schema::OptionalString => {
                if value.is_null() || value.is_string() {
                    Ok(())
                } else {
                    Err(format!("{path}: expected a string or null"))
                }
            }
            Schema::Integer => {
                if value.is_i64() || value.is_u64() {
                    Ok(())
                } else {
                    Err(format!("{path}: expected an integer"))
                }
            }
            Schema::Number => {
                if value.is_number() {
                    Ok(())
                } else {
                    Err(format!("{path}: expected a number"))
                }
            }
            Schema::Bool => {
                if value.is_boolean() {
                    Ok(())
                } else {
                    Err(format!("{path}: expected a boolean"))
                }
            }
            Schema::Array { items, min_items } => {
                let arr = value
                    .as_array()
                    .ok_or_else(|| format!("{path}: expected an array"))?;
                if arr.len() < *min_items {
                    return Err(format!("{path}: expected at least {min_items} items"));
                }
                for (i, v) in arr.iter().enumerate() {
                    items.validate_at(v, &format!("{path}[{i}]"))?;
                }
                Ok(())
            }
            Schema::Object { fields } => {
                let obj = value
                    .as_object()
                    .ok_or_else(|| format!("{path}: expected an object"))?;
                for f in fields {
                    match obj.get(f.name) {
                        Some(v) => f.schema.validate_at(v, &format!("{path}.{}", f.name))?,
                        None if f.required => return Err(format!("{path}: missing field {:?}", f.name)),
                        None => {}
                    }
                }
                Ok(())
            }
        }
    }

    /// JSON-Schema rendering, for inclusion in prompts.
    pub fn to_json_schema(&self) -> Value {
        match self {
            Schema::String { .. } => json!({"type": "string"}),
            Schema::OptionalString => json!({"type": ["string", "null"]}),
            Schema::Integer => json!({"type": "integer"}),
            Schema::Number => json!({"type": "number"}),
            Schema::Bool => json!({"type": "boolean"}),
            Schema::Array { items, .. } => json!({"type": "array", "items": items.to_json_schema()}),
            Schema::Object { fields } => {
                let props: serde_json::Map<String, Value> = fields
                    .iter()
                    .map(|f| (f.name.to_string(), f.schema.to_json_schema()))
                    .collect();
                let required: Vec<&str> = fields.iter().filter(|f| f.required).map(|f| f.name).collect();
                json!({"type": "object", "properties": props, "required": required})
            }
        }
    }
}

pub mod ids {
    pub const SKILL_ANNOTATION: &str = "skill-annotation";
    pub const SKILL_CATEGORIES: &str = "skill-categories";
    pub const SUBSKILL_LIST: &str = "subskill-list";
    pub const DATA_SPECS: &str = "data-specs";
    pub const MATH_DATUM: &str = "math-datum";
    pub const VQA_DESCRIPTION: &str = "vqa-description";
    pub const VQA_QUESTIONS: &str = "vqa-questions";
    pub const CODE_PROBLEM: &str = "code-problem";
    pub const CODE_SOLUTION: &str = "code-solution";
}

#[derive(Debug, Clone)]
pub struct SchemaRegistry {
    schemas: BTreeMap<String, Schema>,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        use ids::*;
        let mut schemas = BTreeMap::new();
        schemas.insert(
            SKILL_ANNOTATION.to_string(),
            object(vec![req("skill", Schema::OptionalString)]),
        );
        schemas.insert(
            SKILL_CATEGORIES.to_string(),
            object(vec![req(
                "categories",
                array(object(vec![req("name", text()), req("members", array(text()))])),
            )]),
        );
        schemas.insert(
            SUBSKILL_LIST.to_string(),
            object(vec![req("subskills", array(text()))]),
        );
        schemas.insert(
            DATA_SPECS.to_string(),
            object(vec![req(
                "specs",
                array(object(vec![
                    req("instruction", text()),
                    opt("target_skill", Schema::OptionalString),
                    opt("target_subskill", Schema::OptionalString),
                ])),
            )]),
        );
        schemas.insert(
            MATH_DATUM.to_string(),
            object(vec![
                req("question", text()),
                req("solution", text()),
                req("final_answer", text()),
            ]),
        );
        schemas.insert(
            VQA_DESCRIPTION.to_string(),
            object(vec![req("description", text())]),
        );
        schemas.insert(
            VQA_QUESTIONS.to_string(),
            object(vec![req(
                "questions",
                Schema::Array {
                    items: Box::new(object(vec![req("question", text()), req("answer", text())])),
                    min_items: 1,
                },
            )]),
        );
        schemas.insert(
            CODE_PROBLEM.to_string(),
            object(vec![req("problem", text()), req("starter_code", text())]),
        );
        schemas.insert(CODE_SOLUTION.to_string(), object(vec![req("solution", text())]));
        SchemaRegistry { schemas }
    }
}

impl SchemaRegistry {
    pub fn get(&self, id: &str) -> Option<&Schema> {
        self.schemas.get(id)
    }

    pub fn register(&mut self, id: impl Into<String>, schema: Schema) {
        self.schemas.insert(id.into(), schema);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.schemas.contains_key(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_accepts_null_rejects_empty_object() {
        let reg = SchemaRegistry::default();
        let s = reg.get(ids::SKILL_ANNOTATION).unwrap();
        assert!(s.validate(&json!({"skill": "Algebra"})).is_ok());
        assert!(s.validate(&json!({"skill": null})).is_ok());
        assert!(s.validate(&json!({})).is_err());
        assert!(s.validate(&json!({"skill": 3})).is_err());
    }

    #[test]
    fn nested_paths_in_errors() {
        let reg = SchemaRegistry::default();
        let s = reg.get(ids::SKILL_CATEGORIES).unwrap();
        let err = s
            .validate(&json!({"categories": [{"name": "x", "members": ["a", 1]}]}))
            .unwrap_err();
        assert!(err.contains("$.categories[0].members[1]"), "{err}");
    }

    #[test]
    fn json_schema_lists_required() {
        let reg = SchemaRegistry::default();
        let js = reg.get(ids::MATH_DATUM).unwrap().to_json_schema();
        assert_eq!(js["required"].as_array().unwrap().len(), 3);
    }
}
