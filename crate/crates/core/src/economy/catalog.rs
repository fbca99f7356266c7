use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Credits, ItemId};

const DEFAULT_CATALOG: &str = include_str!("../../assets/catalog.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Gear,
    Consumable,
    Loot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    pub name: String,
    pub category: Category,
    /// Base shop price; live prices may be changed by interventions.
    pub npc_price: Credits,
    pub tradable: bool,
}

/// Catalog file: a `version` plus one `[[items]]` record per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: u32,
    pub items: Vec<Item>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("catalog parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("catalog i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid catalog: {0}")]
    Invalid(String),
}

impl Default for Catalog {
    fn default() -> Self {
        Catalog::from_toml(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }
}

impl Catalog {
    pub fn from_toml(text: &str) -> Result<Self, CatalogError> {
        let c: Catalog = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.items.is_empty() {
            return Err(CatalogError::Invalid("no items".into()));
        }
        let mut ids: Vec<ItemId> = self.items.iter().map(|i| i.item_id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.items.len() {
            return Err(CatalogError::Invalid("duplicate item_id".into()));
        }
        if let Some(i) = self.items.iter().find(|i| i.npc_price == 0) {
            return Err(CatalogError::Invalid(format!("item {} has a zero price", i.item_id.0)));
        }
        Ok(())
    }

    pub fn get(&self, id: ItemId) -> Option<&Item> {
        self.items.iter().find(|i| i.item_id == id)
    }

    pub fn of_category(&self, category: Category) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.category == category)
    }

    pub fn cheapest_price(&self) -> Credits {
        self.items.iter().map(|i| i.npc_price).min().unwrap_or(0)
    }

    pub fn cheapest_gear_price(&self) -> Option<Credits> {
        self.of_category(Category::Gear).map(|i| i.npc_price).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_catalog_shape() {
        let c = Catalog::default();
        assert_eq!(c.items.len(), 12);
        for cat in [Category::Gear, Category::Consumable, Category::Loot] {
            assert!(c.of_category(cat).count() >= 3);
        }
        assert_eq!(c.cheapest_gear_price(), Some(450));
        assert_eq!(c.cheapest_price(), 60);
    }

    #[test]
    fn rejects_duplicates_and_free_items() {
        let dup = "version = 1\n[[items]]\nitem_id = 1\nname = \"a\"\ncategory = \"gear\"\nnpc_price = 5\ntradable = true\n[[items]]\nitem_id = 1\nname = \"b\"\ncategory = \"loot\"\nnpc_price = 5\ntradable = true\n";
        assert!(Catalog::from_toml(dup).is_err());
        let free = "version = 1\n[[items]]\nitem_id = 1\nname = \"a\"\ncategory = \"gear\"\nnpc_price = 0\ntradable = true\n";
        assert!(Catalog::from_toml(free).is_err());
    }
}
