use latentmark::registry::{IdentityRegistry, DEFAULT_HAMMING_FLOOR};

#[test]
fn hundred_assignments_keep_pairwise_distance() {
    let mut reg = IdentityRegistry::new(16, DEFAULT_HAMMING_FLOOR, 42).unwrap();
    for i in 0..100 {
        reg.assign(&format!("user{i:03}"), "").unwrap();
    }
    let payloads: Vec<_> = reg.users.values().map(|id| id.payload.clone()).collect();
    assert_eq!(payloads.len(), 100);
    let mut min = usize::MAX;
    for (i, a) in payloads.iter().enumerate() {
        for b in &payloads[i + 1..] {
            min = min.min(a.hamming(b).unwrap());
        }
    }
    assert!(min >= DEFAULT_HAMMING_FLOOR, "closest pair is {min} bits apart");
}

#[test]
fn assignment_is_seed_deterministic() {
    let run = || {
        let mut reg = IdentityRegistry::new(10, 3, 7).unwrap();
        (0..20).map(|i| reg.assign(&i.to_string(), "").unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn concurrent_writers_do_not_lose_assignments() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("registry.json");
    std::thread::scope(|s| {
        for t in 0..4 {
            let path = &path;
            s.spawn(move || {
                for i in 0..5 {
                    latentmark::registry::assign_persistent(path, &format!("t{t}-{i}"), "", || {
                        IdentityRegistry::new(16, 4, 1)
                    })
                    .unwrap();
                }
            });
        }
    });
    let reg = IdentityRegistry::load(&path).unwrap();
    assert_eq!(reg.len(), 20);
}
