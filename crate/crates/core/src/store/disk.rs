//! On-disk layout:
//! `<root>/<repo>/repo.json`, `<root>/<repo>/<package>/package.json`,
//! `<root>/<repo>/<package>/<rev>/manifest-<k>.cmf` and `meta.json`,
//! `<root>/_iesd/<package>.json`.
//!
//! Revision directories are written to a temporary sibling and renamed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    content_digest, parse_manifest, serialize_manifest, Package, PackageRevision, PackageStore,
    Repository, RepositoryKind, Revision, RevisionRef, RevisionState, StoreError,
};
use crate::intent::{parse_package_descriptor, PackageDescriptor};

const IESD_DIR: &str = "_iesd";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RepoMeta {
    kind: RepositoryKind,
    owner_edge: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackageMeta {
    next_revision: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RevisionMeta {
    state: RevisionState,
    digest: String,
    setters: BTreeMap<String, Vec<(usize, String)>>,
    labels: BTreeMap<String, String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("metadata serializes");
    out.push(b'\n');
    out
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))
}

pub(super) fn write_repository(root: &Path, repo: &Repository) -> Result<(), StoreError> {
    let dir = root.join(&repo.id);
    fs::create_dir_all(&dir)?;
    let meta = RepoMeta { kind: repo.kind, owner_edge: repo.owner_edge.clone() };
    write_atomic(&dir.join("repo.json"), &to_json(&meta))
}

pub(super) fn remove_repository(root: &Path, id: &str) -> Result<(), StoreError> {
    let dir = root.join(id);
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    Ok(())
}

pub(super) fn write_package_meta(root: &Path, repo: &str, package: &str, next: u32) -> Result<(), StoreError> {
    let dir = root.join(repo).join(package);
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("package.json"), &to_json(&PackageMeta { next_revision: next }))
}

fn revision_meta(rev: &PackageRevision) -> RevisionMeta {
    RevisionMeta {
        state: rev.state,
        digest: rev.digest.clone(),
        setters: rev
            .setters()
            .into_iter()
            .map(|(param, paths)| (param, paths.into_iter().map(|(i, p)| (i, p.to_string())).collect()))
            .collect(),
        labels: rev.labels.clone(),
    }
}

pub(super) fn write_revision(root: &Path, repo: &str, rev: &PackageRevision) -> Result<(), StoreError> {
    let package_dir = root.join(repo).join(&rev.name);
    fs::create_dir_all(&package_dir)?;
    let final_dir = package_dir.join(rev.revision.to_string());
    let tmp_dir = package_dir.join(format!(".{}.tmp", rev.revision));
    if tmp_dir.exists() {
        fs::remove_dir_all(&tmp_dir)?;
    }
    fs::create_dir_all(&tmp_dir)?;
    for (k, doc) in rev.manifests.iter().enumerate() {
        fs::write(tmp_dir.join(format!("manifest-{k}.cmf")), serialize_manifest(doc))?;
    }
    fs::write(tmp_dir.join("meta.json"), to_json(&revision_meta(rev)))?;
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    fs::rename(&tmp_dir, &final_dir)?;
    Ok(())
}

pub(super) fn write_revision_meta(root: &Path, repo: &str, rev: &PackageRevision) -> Result<(), StoreError> {
    let dir = root.join(repo).join(&rev.name).join(rev.revision.to_string());
    write_atomic(&dir.join("meta.json"), &to_json(&revision_meta(rev)))
}

pub(super) fn remove_revision(root: &Path, r: &RevisionRef) -> Result<(), StoreError> {
    let dir = root.join(&r.repo).join(&r.package).join(r.revision.to_string());
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    Ok(())
}

pub(super) fn write_descriptor(root: &Path, descriptor: &PackageDescriptor) -> Result<(), StoreError> {
    let dir = root.join(IESD_DIR);
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(format!("{}.json", descriptor.name)), &to_json(descriptor))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_revision(dir: &Path, package: &str, revision: Revision) -> Result<PackageRevision, StoreError> {
    let meta: RevisionMeta = read_json(&dir.join("meta.json"))?;
    let mut manifests = Vec::new();
    for k in 0.. {
        let path = dir.join(format!("manifest-{k}.cmf"));
        if !path.exists() {
            break;
        }
        let text = fs::read_to_string(&path)?;
        manifests.push(parse_manifest(&text)?);
    }
    let digest = content_digest(package, revision, &manifests, &meta.labels);
    if digest != meta.digest {
        return Err(StoreError::Corrupt(format!("{}: digest mismatch", dir.display())));
    }
    Ok(PackageRevision {
        name: package.to_string(),
        revision,
        manifests,
        state: meta.state,
        labels: meta.labels,
        digest,
    })
}

type Loaded = (BTreeMap<String, Repository>, BTreeMap<String, PackageDescriptor>);

pub(super) fn load(root: &Path) -> Result<Loaded, StoreError> {
    let mut repos = BTreeMap::new();
    let mut descriptors = BTreeMap::new();
    for entry in sorted_entries(root)? {
        let name = file_name(&entry);
        if !entry.is_dir() {
            continue;
        }
        if name == IESD_DIR {
            for file in sorted_entries(&entry)? {
                if file.extension().is_some_and(|e| e == "json") {
                    let text = fs::read_to_string(&file)?;
                    let d = parse_package_descriptor(&text)
                        .map_err(|e| StoreError::Corrupt(format!("{}: {e}", file.display())))?;
                    descriptors.insert(d.name.clone(), d);
                }
            }
            continue;
        }
        let meta_path = entry.join("repo.json");
        if !meta_path.exists() {
            continue;
        }
        let meta: RepoMeta = read_json(&meta_path)?;
        let mut packages = BTreeMap::new();
        for package_dir in sorted_entries(&entry)?.into_iter().filter(|p| p.is_dir()) {
            let package = file_name(&package_dir);
            let pmeta: PackageMeta = read_json(&package_dir.join("package.json"))?;
            let mut revisions = BTreeMap::new();
            for rev_dir in sorted_entries(&package_dir)?.into_iter().filter(|p| p.is_dir()) {
                let Ok(revision) = file_name(&rev_dir).parse::<Revision>() else { continue };
                revisions.insert(revision.0, load_revision(&rev_dir, &package, revision)?);
            }
            packages.insert(package, Package { next_revision: pmeta.next_revision, revisions });
        }
        repos.insert(name.clone(), Repository { id: name, kind: meta.kind, owner_edge: meta.owner_edge, packages });
    }
    Ok((repos, descriptors))
}

pub(super) fn import_blueprints(
    store: &mut PackageStore,
    repo: &str,
    dir: &Path,
) -> Result<Vec<RevisionRef>, StoreError> {
    let mut published = Vec::new();
    for package_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let package = file_name(&package_dir);
        let iesd = package_dir.join("iesd.json");
        if iesd.exists() {
            let text = fs::read_to_string(&iesd)?;
            let d = parse_package_descriptor(&text)
                .map_err(|e| StoreError::Corrupt(format!("{}: {e}", iesd.display())))?;
            store.register_descriptor(d)?;
        }
        let mut revisions: Vec<(Revision, PathBuf)> = sorted_entries(&package_dir)?
            .into_iter()
            .filter(|p| p.is_dir())
            .filter_map(|p| file_name(&p).parse::<Revision>().ok().map(|r| (r, p)))
            .collect();
        revisions.sort();
        for (revision, rev_dir) in revisions {
            let mut manifests = Vec::new();
            for file in sorted_entries(&rev_dir)? {
                if file.extension().is_some_and(|e| e == "cmf") {
                    manifests.push(parse_manifest(&fs::read_to_string(&file)?)?);
                }
            }
            let label = revision.to_string();
            let r = store.create_revision(repo, &package, Some(&label), manifests, BTreeMap::new())?;
            store.publish(&r)?;
            published.push(r);
        }
    }
    Ok(published)
}
