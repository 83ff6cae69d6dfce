mod support;

use std::collections::BTreeMap;

use camino_core::intent::{CpuQuantity, MemoryQuantity, MemoryUnit, ResourceRequest};
use camino_core::planner::{place_services, EdgeInventory};
use camino_core::store::{
    parse_manifest, serialize_manifest, BlueprintRef, HydrationRequest, PackageStore, RepositoryKind, RevisionRef,
    StoreError,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn topological_order_respects_every_edge(seed in any::<u64>()) {
        support::order_trial(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn placement_never_overcommits(
        requests in prop::collection::vec((1u64..8_000, 1u64..(8u64 << 30)), 1..8),
        free in prop::collection::vec((0u64..16_000, 0u64..(16u64 << 30)), 1..4),
    ) {
        let services: Vec<serde_json::Value> = (0..requests.len())
            .map(|i| serde_json::json!({"package_name": format!("S{i}"), "version": "v1"}))
            .collect();
        let doc = serde_json::json!({"domain_name": "D", "deployment_id": "d",
            "timestamp": "2025-01-01T00:00:00Z", "services": services});
        let intent = camino_core::intent::parse_deployment_intent(&doc.to_string()).unwrap();
        let reqs: BTreeMap<String, ResourceRequest> = requests
            .iter()
            .enumerate()
            .map(|(i, (c, m))| (format!("S{i}"), ResourceRequest::new(*c, *m)))
            .collect();
        let inventory: Vec<EdgeInventory> = free
            .iter()
            .enumerate()
            .map(|(i, (c, m))| EdgeInventory { edge_id: format!("E{i}"), free: ResourceRequest::new(*c, *m) })
            .collect();
        if let Ok(plan) = place_services(&intent, &reqs, &inventory) {
            prop_assert_eq!(plan.len(), reqs.len());
            for e in &inventory {
                let used: ResourceRequest =
                    plan.iter().filter(|(_, edge)| **edge == e.edge_id).map(|(s, _)| reqs[s]).sum();
                prop_assert!(used.fits_within(&e.free), "{} over-committed: {:?} > {:?}", e.edge_id, used, e.free);
            }
        }
    }

    #[test]
    fn mesh_planning_is_total(seed in any::<u64>()) {
        support::mesh_trial(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn cpu_quantities_round_trip(n in 1u64..10_000_000, millis in any::<bool>()) {
        let q = if millis { CpuQuantity::Millis(n) } else { CpuQuantity::from_cores(n).unwrap() };
        prop_assert_eq!(q.to_string().parse::<CpuQuantity>().unwrap(), q);
    }

    #[test]
    fn memory_quantities_round_trip(n in 1u64..(1u64 << 30), unit in 0usize..4) {
        let unit = [MemoryUnit::Bytes, MemoryUnit::Ki, MemoryUnit::Mi, MemoryUnit::Gi][unit];
        let q = MemoryQuantity::new(n, unit).unwrap();
        let back = q.to_string().parse::<MemoryQuantity>().unwrap();
        prop_assert_eq!(back, q);
        prop_assert_eq!(back.bytes(), n * unit.multiplier());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reconciliation_converges(seed in any::<u64>()) {
        support::convergence_trial(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn admission_is_atomic_under_faults(seed in any::<u64>()) {
        support::admission_trial(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn monitoring_matches_oracle(seed in any::<u64>()) {
        support::monitoring_trial(seed, 2_000, 20).map_err(TestCaseError::fail)?;
    }
}

const BLUEPRINT: &str = "\
kind: Deployment
metadata:
  name: w
  namespace: default # set: namespace
spec:
  containers:
    - name: c # set: container
      resources:
        cpu: 1 # set: cpu
        memory: 1Mi # set: memory
";

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// No sequence of hydrations, updates or deletions alters a published
    /// blueprint revision.
    #[test]
    fn published_blueprints_are_immutable(ops in prop::collection::vec(0u8..4, 1..20)) {
        let mut store = PackageStore::in_memory();
        store.register_repository("bp", RepositoryKind::Blueprint, None).unwrap();
        store.register_repository("edge1-deploy", RepositoryKind::Deployment, Some("Edge1")).unwrap();
        let bp = store.create_revision("bp", "pkg", None, vec![parse_manifest(BLUEPRINT).unwrap()], BTreeMap::new()).unwrap();
        store.publish(&bp).unwrap();
        let digest = store.revision(&bp).unwrap().digest().to_string();
        let text = serialize_manifest(&store.revision(&bp).unwrap().manifests[0]);
        let mut hydrated: Vec<RevisionRef> = Vec::new();
        for (i, op) in ops.iter().enumerate() {
            match op {
                0 => {
                    let bindings = BTreeMap::from([
                        ("namespace".to_string(), camino_core::store::ScalarValue::Str(format!("ns{i}"))),
                        ("container".to_string(), camino_core::store::ScalarValue::Str("app".into())),
                        ("cpu".to_string(), camino_core::store::ScalarValue::Int(i as i64 + 1)),
                        ("memory".to_string(), camino_core::store::ScalarValue::Str("1Gi".into())),
                    ]);
                    let r = store.hydrate(&HydrationRequest {
                        blueprint: BlueprintRef { repo: "bp".into(), package: "pkg".into(), revision: bp.revision },
                        descriptor: None,
                        qos: None,
                        defaults: BTreeMap::new(),
                        extra_bindings: bindings,
                        target: "edge1-deploy".into(),
                        target_package: format!("pkg@d{i}"),
                        labels: BTreeMap::new(),
                    }).unwrap();
                    hydrated.push(r);
                }
                1 => {
                    let err = store.update_revision(&bp, vec![parse_manifest("a: 1\n").unwrap()]).unwrap_err();
                    prop_assert!(matches!(err, StoreError::ImmutabilityViolation(..)), "{err:?}");
                }
                2 => {
                    if !hydrated.is_empty() {
                        let err = store.delete_revision(&bp).unwrap_err();
                        prop_assert!(matches!(err, StoreError::ImmutabilityViolation(..)), "{err:?}");
                    }
                }
                _ => {
                    if let Some(r) = hydrated.pop() {
                        store.delete_revision(&r).unwrap();
                    }
                }
            }
            let now = store.revision(&bp).unwrap();
            prop_assert_eq!(now.digest(), digest.as_str());
            prop_assert_eq!(serialize_manifest(&now.manifests[0]), text.clone());
        }
    }
}

#[test]
fn fault_injection_exercises_every_outcome() {
    let mut total = support::AdmissionStats::default();
    for seed in 0..40 {
        let s = support::admission_trial(seed).unwrap();
        total.approved += s.approved;
        total.failed += s.failed;
        total.rejected += s.rejected;
    }
    assert!(total.approved > 0 && total.failed > 0 && total.rejected > 0, "{total:?}");
}

#[test]
fn resource_conservation() {
    support::conservation_check().unwrap();
}
