//! Binary PLY checkpoints in the common splat layout, and point clouds.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ply_rs::parser::Parser;
use ply_rs::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType,
    ScalarType,
};
use ply_rs::writer::Writer;

use crate::error::{Error, Result};
use crate::gaussian::{sh_coeff_count, GaussianSet, MAX_SH_DEGREE};

/// Property names of a checkpoint vertex at the given SH degree.
pub fn checkpoint_properties(sh_degree: u8) -> Vec<String> {
    let rest = 3 * (sh_coeff_count(sh_degree) - 1);
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].map(String::from).to_vec();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn vertex_def(names: &[String], scalar: ScalarType) -> ElementDef {
    let mut el = ElementDef::new("vertex".to_string());
    for n in names {
        el.properties
            .add(PropertyDef::new(n.clone(), PropertyType::Scalar(scalar.clone())));
    }
    el
}

fn write_vertices(path: &Path, def: ElementDef, rows: Vec<DefaultElement>) -> Result<()> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    ply.header.elements.add(def);
    ply.payload.insert("vertex".to_string(), rows);
    let file = File::create(path).map_err(|e| Error::load(path, e))?;
    let mut out = BufWriter::new(file);
    Writer::new()
        .write_ply(&mut out, &mut ply)
        .map_err(|e| Error::load(path, e))?;
    out.flush()?;
    Ok(())
}

fn read_vertices(path: &Path) -> Result<(ElementDef, Vec<DefaultElement>)> {
    let file = File::open(path).map_err(|e| Error::load(path, e))?;
    let mut reader = BufReader::new(file);
    let mut ply = Parser::<DefaultElement>::new()
        .read_ply(&mut reader)
        .map_err(|e| Error::format(path, format!("malformed PLY: {e}")))?;
    let def = ply
        .header
        .elements
        .get("vertex")
        .cloned()
        .ok_or_else(|| Error::format(path, "no vertex element"))?;
    let rows = ply.payload.remove("vertex").unwrap_or_default();
    Ok((def, rows))
}

fn scalar(row: &DefaultElement, name: &str) -> Option<f64> {
    match row.get(name)? {
        Property::Float(v) => Some(*v as f64),
        Property::Double(v) => Some(*v),
        Property::UChar(v) => Some(*v as f64),
        Property::Char(v) => Some(*v as f64),
        Property::Short(v) => Some(*v as f64),
        Property::UShort(v) => Some(*v as f64),
        Property::Int(v) => Some(*v as f64),
        Property::UInt(v) => Some(*v as f64),
        _ => None,
    }
}

/// Writes `set` as a little-endian float32 PLY. Values are rounded to `f32`.
pub fn save_checkpoint(set: &GaussianSet, path: &Path) -> Result<()> {
    set.validate()?;
    let names = checkpoint_properties(set.sh_degree);
    let k = set.coeffs_per_gaussian();
    let rows = (0..set.len())
        .map(|i| {
            let mut values = Vec::with_capacity(names.len());
            values.extend(set.position(i));
            values.extend([0.0; 3]);
            let coeffs = set.color_coeffs(i);
            values.extend(&coeffs[..3]);
            // f_rest is channel-major: all red coefficients, then green, then blue
            for ch in 0..3 {
                values.extend((1..k).map(|c| coeffs[3 * c + ch]));
            }
            values.push(set.raw_opacities[i]);
            values.extend(set.raw_scale(i));
            values.extend(set.rotation(i));
            let mut row = DefaultElement::new();
            for (n, v) in names.iter().zip(values) {
                row.insert(n.clone(), Property::Float(v as f32));
            }
            row
        })
        .collect();
    write_vertices(path, vertex_def(&names, ScalarType::Float), rows)
}

/// Reads a checkpoint written by [`save_checkpoint`]. The returned set's
/// capacity equals its size.
pub fn load_checkpoint(path: &Path) -> Result<GaussianSet> {
    let (def, rows) = read_vertices(path)?;
    let found: Vec<String> = def.properties.keys().cloned().collect();
    let degree = (0..=MAX_SH_DEGREE)
        .find(|&d| checkpoint_properties(d) == found)
        .ok_or_else(|| {
            Error::format(
                path,
                format!("unknown property layout for a splat checkpoint: {}", found.join(" ")),
            )
        })?;
    let k = sh_coeff_count(degree);
    let mut set = GaussianSet::with_capacity(rows.len(), degree);
    for (r, row) in rows.iter().enumerate() {
        let get = |name: &str| {
            scalar(row, name)
                .ok_or_else(|| Error::format(path, format!("vertex {r}: bad `{name}`")))
        };
        for a in ["x", "y", "z"] {
            set.positions.push(get(a)?);
        }
        let mut coeffs = vec![0.0; 3 * k];
        for ch in 0..3 {
            coeffs[ch] = get(&format!("f_dc_{ch}"))?;
            for c in 1..k {
                coeffs[3 * c + ch] = get(&format!("f_rest_{}", ch * (k - 1) + c - 1))?;
            }
        }
        set.colors.extend(coeffs);
        set.raw_opacities.push(get("opacity")?);
        for a in 0..3 {
            set.raw_scales.push(get(&format!("scale_{a}"))?);
        }
        for a in 0..4 {
            set.rotations.push(get(&format!("rot_{a}"))?);
        }
    }
    set.validate().map_err(|e| Error::format(path, e))?;
    Ok(set)
}

/// Positions with RGB colours in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Reads `x/y/z` and, when present, `red/green/blue` (8-bit or float).
/// Points without colour come out mid grey.
pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let (def, rows) = read_vertices(path)?;
    for a in ["x", "y", "z"] {
        if !def.properties.contains_key(a) {
            return Err(Error::format(path, format!("point cloud lacks `{a}`")));
        }
    }
    let color_scale = match def.properties.get("red").map(|p| &p.data_type) {
        Some(PropertyType::Scalar(ScalarType::UChar)) => Some(1.0 / 255.0),
        Some(PropertyType::Scalar(ScalarType::Float | ScalarType::Double)) => Some(1.0),
        Some(other) => {
            return Err(Error::format(path, format!("unsupported colour type {other:?}")))
        }
        None => None,
    };
    let mut cloud = PointCloud::default();
    for (r, row) in rows.iter().enumerate() {
        let get = |name: &str| {
            scalar(row, name)
                .ok_or_else(|| Error::format(path, format!("vertex {r}: bad `{name}`")))
        };
        cloud.positions.push([get("x")?, get("y")?, get("z")?]);
        cloud.colors.push(match color_scale {
            Some(s) => [get("red")? * s, get("green")? * s, get("blue")? * s],
            None => [0.5; 3],
        });
    }
    Ok(cloud)
}

/// Writes float64 positions and 8-bit colours.
pub fn write_point_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut def = ElementDef::new("vertex".to_string());
    for a in ["x", "y", "z"] {
        def.properties
            .add(PropertyDef::new(a.into(), PropertyType::Scalar(ScalarType::Double)));
    }
    for c in ["red", "green", "blue"] {
        def.properties
            .add(PropertyDef::new(c.into(), PropertyType::Scalar(ScalarType::UChar)));
    }
    let rows = cloud
        .positions
        .iter()
        .zip(&cloud.colors)
        .map(|(p, c)| {
            let mut row = DefaultElement::new();
            for (a, v) in ["x", "y", "z"].iter().zip(p) {
                row.insert(a.to_string(), Property::Double(*v));
            }
            for (n, v) in ["red", "green", "blue"].iter().zip(c) {
                row.insert(n.to_string(), Property::UChar((v.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
            row
        })
        .collect();
    write_vertices(path, def, rows)
}
