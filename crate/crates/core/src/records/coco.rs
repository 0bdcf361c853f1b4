//! COCO-style ground-truth documents plus the image → domain sidecar.
//!
//! Images are keyed by `file_name`, which doubles as the record's
//! `image_id`; categories are matched to the class catalog by name.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Catalogs, ClassCatalog, GroundTruthObject, GroundTruthRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Maps `file_name` to domain id.
pub type DomainSidecar = BTreeMap<String, String>;

/// Converts a COCO document and its sidecar into ground-truth records in
/// image order.
pub fn from_document(
    doc: &CocoDocument,
    sidecar: &DomainSidecar,
    catalogs: &Catalogs,
) -> Result<Vec<GroundTruthRecord>> {
    let mut class_of: HashMap<u64, usize> = HashMap::new();
    for cat in &doc.categories {
        let class = catalogs.classes.index_of(&cat.name).ok_or_else(|| {
            Error::validation(format!(
                "category `{}` is not in the class catalog",
                cat.name
            ))
        })?;
        class_of.insert(cat.id, class);
    }

    let mut slot: HashMap<u64, usize> = HashMap::new();
    let mut records = Vec::with_capacity(doc.images.len());
    for img in &doc.images {
        let domain_id = sidecar.get(&img.file_name).ok_or_else(|| {
            Error::validation(format!(
                "image `{}` has no domain in the sidecar",
                img.file_name
            ))
        })?;
        if slot.insert(img.id, records.len()).is_some() {
            return Err(Error::validation(format!("duplicate image id {}", img.id)));
        }
        records.push(GroundTruthRecord {
            image_id: img.file_name.clone(),
            domain_id: domain_id.clone(),
            objects: Vec::new(),
        });
    }

    for ann in &doc.annotations {
        let &i = slot.get(&ann.image_id).ok_or_else(|| {
            Error::validation(format!(
                "annotation {} references unknown image {}",
                ann.id, ann.image_id
            ))
        })?;
        let &class = class_of.get(&ann.category_id).ok_or_else(|| {
            Error::validation(format!(
                "annotation {} references unknown category {}",
                ann.id, ann.category_id
            ))
        })?;
        records[i].objects.push(GroundTruthObject {
            class,
            bbox: ann.bbox,
        });
    }

    for r in &records {
        r.validate(&catalogs.classes, &catalogs.domains)?;
    }
    Ok(records)
}

/// Builds a COCO document (category ids are class index + 1) and sidecar.
pub fn to_document(
    records: &[GroundTruthRecord],
    classes: &ClassCatalog,
) -> (CocoDocument, DomainSidecar) {
    let categories = classes
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| CocoCategory {
            id: i as u64 + 1,
            name: name.clone(),
        })
        .collect();
    let mut images = Vec::with_capacity(records.len());
    let mut annotations = Vec::new();
    let mut sidecar = DomainSidecar::new();
    for (i, r) in records.iter().enumerate() {
        let image_id = i as u64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name: r.image_id.clone(),
            width: None,
            height: None,
        });
        sidecar.insert(r.image_id.clone(), r.domain_id.clone());
        for obj in &r.objects {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: obj.class as u64 + 1,
                bbox: obj.bbox,
                area: obj.bbox[2] * obj.bbox[3],
                iscrowd: 0,
            });
        }
    }
    (
        CocoDocument {
            images,
            annotations,
            categories,
        },
        sidecar,
    )
}

pub fn read_ground_truth<A: Read, B: Read>(
    coco: A,
    sidecar: B,
    catalogs: &Catalogs,
) -> Result<Vec<GroundTruthRecord>> {
    let doc: CocoDocument = serde_json::from_reader(coco)?;
    let sidecar: DomainSidecar = serde_json::from_reader(sidecar)?;
    from_document(&doc, &sidecar, catalogs)
}

pub fn write_ground_truth<A: Write, B: Write>(
    records: &[GroundTruthRecord],
    classes: &ClassCatalog,
    coco: A,
    sidecar: B,
) -> Result<()> {
    let (doc, side) = to_document(records, classes);
    serde_json::to_writer(coco, &doc)?;
    serde_json::to_writer_pretty(sidecar, &side)?;
    Ok(())
}
