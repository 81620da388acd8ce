//! Registry of loaders that turn an on-disk checkpoint into a [`ModelHandle`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, OnceLock, RwLock};

use super::convnet::ConvNet;
use super::reference::{reference_convnet, ReferenceKind};
use super::vit::TinyVit;
use super::ModelHandle;
use crate::error::{DixError, Result};

pub trait ModelPlugin: Send + Sync {
    fn name(&self) -> &str;

    /// Configuration keys this plugin understands.
    fn accepted_keys(&self) -> &[&'static str];

    fn load(&self, checkpoint: &Path, config: &BTreeMap<String, String>) -> Result<ModelHandle>;
}

type Registry = RwLock<BTreeMap<String, Arc<dyn ModelPlugin>>>;

fn registry() -> &'static Registry {
    static REGISTRY: OnceLock<Registry> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map: BTreeMap<String, Arc<dyn ModelPlugin>> = BTreeMap::new();
        map.insert("convnet-json".into(), Arc::new(ConvNetJson));
        map.insert("vit-json".into(), Arc::new(VitJson));
        RwLock::new(map)
    })
}

pub fn register_plugin(plugin: Arc<dyn ModelPlugin>) {
    registry()
        .write()
        .expect("plugin registry poisoned")
        .insert(plugin.name().to_string(), plugin);
}

pub fn registered_plugins() -> Vec<String> {
    registry()
        .read()
        .expect("plugin registry poisoned")
        .keys()
        .cloned()
        .collect()
}

pub fn load_external_model(
    plugin_name: &str,
    checkpoint_path: &Path,
    config: &BTreeMap<String, String>,
) -> Result<ModelHandle> {
    let plugin = registry()
        .read()
        .expect("plugin registry poisoned")
        .get(plugin_name)
        .cloned()
        .ok_or_else(|| {
            DixError::capability(format!(
                "no plugin named {plugin_name:?}; available: {}",
                registered_plugins().join(", ")
            ))
        })?;
    let accepted = plugin.accepted_keys();
    if let Some(bad) = config.keys().find(|k| !accepted.contains(&k.as_str())) {
        return Err(DixError::config(format!(
            "plugin {plugin_name:?} does not accept key {bad:?}; accepted keys: {}",
            accepted.join(", ")
        )));
    }
    plugin.load(checkpoint_path, config)
}

fn read_checkpoint(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| DixError::Load(format!("cannot read {}: {e}", path.display())))
}

/// Parameter-group shapes, used to report checkpoint/architecture mismatches.
fn convnet_layout(net: &ConvNet) -> Vec<(String, String)> {
    let mut v = vec![(
        "stem".to_string(),
        format!("{}x{}x3x3 in {:?}", net.stem.cout, net.stem.cin, net.input_shape),
    )];
    for (i, b) in net.blocks.iter().enumerate() {
        v.push((
            format!("block{}", i + 1),
            format!("{}->{} pool={}", b.conv1.cin, b.conv2.cout, b.pool),
        ));
    }
    v.push((
        "head".to_string(),
        format!(
            "{:?} hidden={:?} out={}x{}",
            net.head_pool,
            net.hidden.as_ref().map(|h| h.out),
            net.out.out,
            net.out.inp
        ),
    ));
    v
}

fn layout_diff(expected: &[(String, String)], found: &[(String, String)]) -> Vec<String> {
    let n = expected.len().max(found.len());
    (0..n)
        .filter_map(|i| match (expected.get(i), found.get(i)) {
            (Some(e), Some(f)) if e == f => None,
            (Some(e), Some(f)) => Some(format!("{}: expected {}, found {}", e.0, e.1, f.1)),
            (Some(e), None) => Some(format!("{}: missing from checkpoint", e.0)),
            (None, Some(f)) => Some(format!("{}: unexpected in checkpoint", f.0)),
            (None, None) => None,
        })
        .collect()
}

fn check_params_consistent(net: &ConvNet) -> Result<()> {
    let mut bad = Vec::new();
    if net.stem.weight.len() != net.stem.cout * net.stem.cin * 9 {
        bad.push("stem".to_string());
    }
    for (i, b) in net.blocks.iter().enumerate() {
        if b.conv1.weight.len() != b.conv1.cout * b.conv1.cin * 9
            || b.conv2.weight.len() != b.conv2.cout * b.conv2.cin * 9
        {
            bad.push(format!("block{}", i + 1));
        }
    }
    if net.out.weight.len() != net.out.out * net.out.inp {
        bad.push("head".into());
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(DixError::Load(format!("parameter sizes inconsistent in: {}", bad.join(", "))))
    }
}

/// Loads a [`ConvNet`] serialized as JSON.
///
/// Config keys: `architecture` (a reference kind whose layout must match),
/// `name` (handle name; defaults to the file stem).
struct ConvNetJson;

impl ModelPlugin for ConvNetJson {
    fn name(&self) -> &str {
        "convnet-json"
    }

    fn accepted_keys(&self) -> &[&'static str] {
        &["architecture", "name"]
    }

    fn load(&self, checkpoint: &Path, config: &BTreeMap<String, String>) -> Result<ModelHandle> {
        let bytes = read_checkpoint(checkpoint)?;
        let net: ConvNet = serde_json::from_slice(&bytes)
            .map_err(|e| DixError::Load(format!("{}: {e}", checkpoint.display())))?;
        check_params_consistent(&net)?;
        if let Some(arch) = config.get("architecture") {
            let kind: ReferenceKind = arch.parse()?;
            let expected = reference_convnet(kind, 0)?;
            let diff = layout_diff(&convnet_layout(&expected), &convnet_layout(&net));
            if !diff.is_empty() {
                return Err(DixError::Load(format!(
                    "checkpoint does not match architecture {kind}: {}",
                    diff.join("; ")
                )));
            }
        }
        ModelHandle::new(handle_name(checkpoint, config), Box::new(net))
    }
}

/// Loads a [`TinyVit`] serialized as JSON. Config keys: `name`.
struct VitJson;

impl ModelPlugin for VitJson {
    fn name(&self) -> &str {
        "vit-json"
    }

    fn accepted_keys(&self) -> &[&'static str] {
        &["name"]
    }

    fn load(&self, checkpoint: &Path, config: &BTreeMap<String, String>) -> Result<ModelHandle> {
        let bytes = read_checkpoint(checkpoint)?;
        let vit: TinyVit = serde_json::from_slice(&bytes)
            .map_err(|e| DixError::Load(format!("{}: {e}", checkpoint.display())))?;
        if vit.pos.len() != vit.tokens() * vit.dim || vit.cls.len() != vit.dim {
            return Err(DixError::Load(format!(
                "position table has {} entries, expected {} tokens x {} dims",
                vit.pos.len(),
                vit.tokens(),
                vit.dim
            )));
        }
        ModelHandle::new(handle_name(checkpoint, config), Box::new(vit))
    }
}

fn handle_name(checkpoint: &Path, config: &BTreeMap<String, String>) -> String {
    config.get("name").cloned().unwrap_or_else(|| {
        checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "external".into())
    })
}
