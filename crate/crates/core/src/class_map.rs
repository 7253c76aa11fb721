//! Case-insensitive mapping from auxiliary-detector vocabularies onto the
//! ID class list.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassMap {
    /// lower-cased source name -> ID class name
    entries: BTreeMap<String, String>,
}

impl ClassMap {
    /// Map where each ID class maps to itself.
    pub fn identity(class_list: &[String]) -> Self {
        let entries = class_list
            .iter()
            .map(|c| (c.to_lowercase(), c.clone()))
            .collect();
        ClassMap { entries }
    }

    /// Builds a map from explicit `(source, target)` pairs. ID class names
    /// always map to themselves, so an auxiliary detector prompted with the
    /// ID vocabulary needs no entries.
    pub fn new<I, S, T>(class_list: &[String], pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let mut map = Self::identity(class_list);
        for (src, dst) in pairs {
            let dst = dst.as_ref();
            let target = class_list
                .iter()
                .find(|c| c.to_lowercase() == dst.to_lowercase())
                .ok_or_else(|| {
                    Error::InvalidParameter(format!("class map target `{dst}` is not an ID class"))
                })?;
            map.entries.insert(src.as_ref().to_lowercase(), target.clone());
        }
        Ok(map)
    }

    /// Reads a JSON object `{"source name": "ID class", ...}`.
    pub fn from_json_reader<R: std::io::Read>(class_list: &[String], reader: R) -> Result<Self> {
        let raw: BTreeMap<String, String> = serde_json::from_reader(reader)
            .map_err(|e| Error::Schema { line: e.line(), message: e.to_string() })?;
        Self::new(class_list, raw)
    }

    pub fn load(class_list: &[String], path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_reader(class_list, BufReader::new(File::open(path.as_ref()).map_err(Error::file(path.as_ref()))?))
    }

    /// ID class the name maps to, or `None` for non-ID names.
    pub fn resolve(&self, name: &str) -> Option<&str> {
        self.entries.get(&name.to_lowercase()).map(String::as_str)
    }

    pub fn is_id(&self, name: &str) -> bool {
        self.resolve(name).is_some()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<String> {
        vec!["car".into(), "person".into()]
    }

    #[test]
    fn case_insensitive_many_to_one() {
        let map = ClassMap::new(&classes(), [("Taxi", "car"), ("Sedan", "CAR"), ("man", "person")]).unwrap();
        assert_eq!(map.resolve("taxi"), Some("car"));
        assert_eq!(map.resolve("SEDAN"), Some("car"));
        assert_eq!(map.resolve("Car"), Some("car"));
        assert_eq!(map.resolve("camel"), None);
    }

    #[test]
    fn unknown_target_rejected() {
        assert!(ClassMap::new(&classes(), [("horse", "animal")]).is_err());
    }

    #[test]
    fn loads_json_object() {
        let map = ClassMap::from_json_reader(&classes(), r#"{"Woman": "person"}"#.as_bytes()).unwrap();
        assert!(map.is_id("woman"));
        assert!(!map.is_id("piano"));
    }
}
