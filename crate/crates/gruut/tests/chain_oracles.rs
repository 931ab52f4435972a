//! Block-tree behavior against independent reference computations: greedy
//! heaviest-subtree fork choice versus a recursive reimplementation, ledger
//! replay versus a hand fold, and the validation violations one by one.

use gruut::chain::{hash_transactions, InsertError};
use gruut::crypto::{sha256, MacScheme, SignatureScheme};
use gruut::{Block, BlockTree, Digest, KeyDirectory, Transaction, Violation};
use gruut::chain::SignerSignature;
use num_bigint::BigInt;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

fn ratio(n: i64, d: i64) -> Ratio<BigInt> {
    Ratio::new(BigInt::from(n), BigInt::from(d))
}

/// Structural block with fabricated signatures; fine for weight and
/// topology tests, which never verify them.
fn scaffold_block(parent: &Block, salt: u64, rng: &mut ChaCha8Rng) -> Block {
    let n_sigs = rng.gen_range(1..=4u32);
    let signer_sigs = (0..n_sigs)
        .map(|i| SignerSignature {
            signer: sha256(&[salt as u8, i as u8, 0x51]),
            signature: vec![0; 8],
            distance: if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..200) },
        })
        .collect();
    Block {
        height: parent.height + 1,
        prev_hash: parent.digest(),
        tx_list: Vec::new(),
        tx_digest: sha256(&salt.to_be_bytes()),
        timestamp_ms: parent.timestamp_ms + 1_000,
        required_signers: n_sigs,
        signer_sigs,
        merger: sha256(&[salt as u8, 0x4d]),
        merger_distance: rng.gen_range(0..100),
        merger_sig: vec![0; 8],
    }
}

fn reference_block_weight(b: &Block, alpha: &Ratio<BigInt>) -> Ratio<BigInt> {
    let sigs = b.signer_sigs.len() as u64;
    let dist: u64 = b.merger_distance + b.signer_sigs.iter().map(|s| s.distance).sum::<u64>();
    let penalty = alpha
        * Ratio::new(
            BigInt::from(dist),
            BigInt::from(sigs + 1) * (BigInt::from(1) << 256),
        );
    Ratio::from_integer(BigInt::from(sigs)) - penalty
}

/// Recursive greedy descent over an adjacency map built from scratch.
fn reference_fork_choice(
    root: Digest,
    blocks: &BTreeMap<Digest, Block>,
    alpha: &Ratio<BigInt>,
) -> Digest {
    let mut children: BTreeMap<Digest, Vec<Digest>> = BTreeMap::new();
    for (d, b) in blocks {
        children.entry(b.prev_hash).or_default().push(*d);
    }
    fn subtree(
        d: &Digest,
        blocks: &BTreeMap<Digest, Block>,
        children: &BTreeMap<Digest, Vec<Digest>>,
        alpha: &Ratio<BigInt>,
    ) -> Ratio<BigInt> {
        let mut w = reference_block_weight(&blocks[d], alpha);
        for c in children.get(d).into_iter().flatten() {
            w += subtree(c, blocks, children, alpha);
        }
        w
    }
    let mut cur = root;
    loop {
        let Some(kids) = children.get(&cur) else { return cur };
        if kids.is_empty() {
            return cur;
        }
        // heaviest subtree, ties to the smaller digest (kids are sorted)
        let mut best: Option<(Ratio<BigInt>, Digest)> = None;
        let mut sorted = kids.clone();
        sorted.sort();
        for c in sorted {
            let w = subtree(&c, blocks, &children, alpha);
            match &best {
                Some((bw, _)) if w <= *bw => {}
                _ => best = Some((w, c)),
            }
        }
        cur = best.unwrap().1;
    }
}

#[test]
fn fork_choice_matches_recursive_reference() {
    let alpha = ratio(1, 2);
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let genesis = Arc::new(Block::genesis());
        // confirmation depth beyond reach so every block stays live
        let mut tree = BlockTree::new(genesis.clone(), 10_000, alpha.clone(), None);
        let mut blocks: BTreeMap<Digest, Block> = BTreeMap::new();
        let mut digests = vec![genesis.digest()];

        let n = rng.gen_range(5..40);
        for salt in 0..n {
            let parent_digest = digests[rng.gen_range(0..digests.len())];
            let parent = if parent_digest == genesis.digest() {
                (*genesis).clone()
            } else {
                blocks[&parent_digest].clone()
            };
            let b = scaffold_block(&parent, seed * 1000 + salt, &mut rng);
            let d = tree.insert(Arc::new(b.clone())).unwrap();
            blocks.insert(d, b);
            digests.push(d);
        }

        let got = tree.fork_choice(&alpha);
        let expect = reference_fork_choice(genesis.digest(), &blocks, &alpha);
        assert_eq!(got, expect, "seed {seed}");

        // the canonical path must end at the fork-choice tip and chain
        // parent links back to genesis
        let path = tree.canonical_path();
        assert_eq!(*path.last().unwrap(), got);
        assert_eq!(path[0], genesis.digest());
        for pair in path.windows(2) {
            let child = blocks.get(&pair[1]).unwrap();
            assert_eq!(child.prev_hash, pair[0]);
        }
    }
}

#[test]
fn insert_rejects_malformed_linkage() {
    let genesis = Arc::new(Block::genesis());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tree = BlockTree::new(genesis.clone(), 10, ratio(1, 2), None);

    let good = scaffold_block(&genesis, 1, &mut rng);
    let d = tree.insert(Arc::new(good.clone())).unwrap();
    assert_eq!(tree.insert(Arc::new(good.clone())), Err(InsertError::DuplicateBlock));

    let mut orphan = scaffold_block(&good, 2, &mut rng);
    orphan.prev_hash = sha256(b"nowhere");
    assert_eq!(tree.insert(Arc::new(orphan)), Err(InsertError::UnknownParent));

    let mut skewed = scaffold_block(&good, 3, &mut rng);
    skewed.height = 5;
    assert_eq!(tree.insert(Arc::new(skewed)), Err(InsertError::BadHeight));

    assert!(tree.contains(&d));
    assert_eq!(tree.height_of(&d), Some(1));
}

#[test]
fn finalization_is_monotone_and_blocks_conflicting_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let genesis = Arc::new(Block::genesis());
    let mut tree = BlockTree::new(genesis.clone(), 3, ratio(1, 2), None);

    let mut chain = vec![(*genesis).clone()];
    let mut fork_parent = None;
    for i in 0..10u64 {
        let b = scaffold_block(chain.last().unwrap(), i, &mut rng);
        tree.insert(Arc::new(b.clone())).unwrap();
        if i == 1 {
            fork_parent = Some(chain.last().unwrap().clone());
        }
        chain.push(b);

        let before = tree.finalized_path().to_vec();
        tree.advance_finalization();
        let after = tree.finalized_path();
        assert!(after.starts_with(&before), "finalized prefix shrank");
        let canon = tree.canonical_path();
        assert!(canon.starts_with(after), "canonical path left the finalized prefix");
    }
    // ten blocks at depth 3: heights 0..=7 are finalized
    assert_eq!(tree.finalized_path().len(), 8);

    // a fork below the finalized boundary is dead on arrival
    let stale = scaffold_block(&fork_parent.unwrap(), 99, &mut rng);
    assert_eq!(tree.insert(Arc::new(stale)), Err(InsertError::FinalityViolation));

    // and so is a second child of an interior finalized block
    let interior = scaffold_block(&chain[3], 98, &mut rng);
    assert_eq!(tree.insert(Arc::new(interior)), Err(InsertError::FinalityViolation));

    // extending the finalized head itself stays legal
    let top = scaffold_block(chain.last().unwrap(), 97, &mut rng);
    tree.insert(Arc::new(top)).unwrap();
}

#[test]
fn ancestor_walk_is_most_recent_first_and_stops_at_genesis() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let genesis = Arc::new(Block::genesis());
    let mut tree = BlockTree::new(genesis.clone(), 100, ratio(1, 2), None);
    let mut chain = vec![(*genesis).clone()];
    for i in 0..5u64 {
        let b = scaffold_block(chain.last().unwrap(), i, &mut rng);
        tree.insert(Arc::new(b.clone())).unwrap();
        chain.push(b);
    }
    let tip = chain.last().unwrap().digest();

    let three = tree.ancestors(&tip, 3);
    assert_eq!(three.len(), 3);
    assert_eq!(three[0].digest(), tip);
    assert_eq!(three[1].digest(), chain[4].digest());
    assert_eq!(three[2].digest(), chain[3].digest());

    let all = tree.ancestors(&tip, 50);
    assert_eq!(all.len(), 6, "walk must stop at genesis");
    assert_eq!(all.last().unwrap().height, 0);

    assert!(tree.ancestors(&sha256(b"unknown"), 3).is_empty());
}

// ---- ledger-backed trees ----

struct Party {
    id: Digest,
    key: gruut::KeyPair,
}

fn setup_parties(rng: &mut ChaCha8Rng, labels: &[&str]) -> (KeyDirectory, BTreeMap<String, Party>) {
    let mut keys = KeyDirectory::new(Arc::new(MacScheme));
    let mut parties = BTreeMap::new();
    for l in labels {
        let key = MacScheme.generate(rng);
        let id = sha256(l.as_bytes());
        keys.insert(id, key.public.clone());
        parties.insert(l.to_string(), Party { id, key });
    }
    (keys, parties)
}

fn transfer(
    keys: &KeyDirectory,
    from: &Party,
    to: &Party,
    amount: u64,
    fee: u64,
    ts: u64,
) -> Transaction {
    Transaction::new_signed(
        keys.scheme(),
        &from.key,
        &to.key,
        from.id,
        to.id,
        amount,
        fee,
        ts,
        "transfer",
        "main",
    )
}

/// Fully signed block over real keys; passes `validate_block`.
fn signed_block(
    keys: &KeyDirectory,
    parent: &Block,
    txs: Vec<Transaction>,
    signers: &[&Party],
    merger: &Party,
    ts: u64,
) -> Block {
    let mut b = Block {
        height: parent.height + 1,
        prev_hash: parent.digest(),
        tx_digest: hash_transactions(&txs),
        tx_list: txs,
        timestamp_ms: ts,
        required_signers: signers.len() as u32,
        signer_sigs: Vec::new(),
        merger: merger.id,
        merger_distance: 5,
        merger_sig: Vec::new(),
    };
    let signing = b.signing_digest();
    b.signer_sigs = signers
        .iter()
        .map(|s| SignerSignature {
            signer: s.id,
            signature: keys.scheme().sign(&s.key.private, &signing),
            distance: 3,
        })
        .collect();
    b.merger_sig = keys.scheme().sign(&merger.key.private, &b.body_bytes());
    b
}

#[test]
fn ledger_replay_matches_hand_fold_and_conserves_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (keys, parties) = setup_parties(&mut rng, &["alice", "bob", "carol", "sig1", "sig2", "mrg"]);
    let initial: BTreeMap<Digest, i128> = [
        (parties["alice"].id, 10_000i128),
        (parties["bob"].id, 5_000),
        (parties["carol"].id, 0),
        (parties["mrg"].id, 0),
    ]
    .into();
    let total: i128 = initial.values().sum();

    let genesis = Arc::new(Block::genesis());
    let mut tree = BlockTree::new(genesis.clone(), 100, ratio(1, 2), Some(initial.clone()));
    let signers = [&parties["sig1"], &parties["sig2"]];

    let mut expected = initial;
    let mut parent = (*genesis).clone();
    let mut ts = 10_000;
    let pairs = [("alice", "bob", 700u64), ("bob", "carol", 450), ("alice", "carol", 125)];
    for (from, to, amount) in pairs {
        let tx = transfer(&keys, &parties[from], &parties[to], amount, 9, ts);
        let b = signed_block(&keys, &parent, vec![tx], &signers, &parties["mrg"], ts);
        assert!(tree.validate_block(&b, &keys, ts).is_ok());
        tree.insert(Arc::new(b.clone())).unwrap();

        *expected.get_mut(&parties[from].id).unwrap() -= amount as i128 + 9;
        *expected.get_mut(&parties[to].id).unwrap() += amount as i128;
        *expected.get_mut(&parties["mrg"].id).unwrap() += 9;

        let tip = b.digest();
        let got = tree.balances_at(&tip).unwrap();
        assert_eq!(got, expected);
        assert_eq!(got.values().sum::<i128>(), total, "value created or destroyed");

        parent = b;
        ts += 20_000;
    }
}

#[test]
fn overspend_and_replayed_transactions_are_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (keys, parties) = setup_parties(&mut rng, &["alice", "bob", "sig1", "mrg"]);
    let initial: BTreeMap<Digest, i128> =
        [(parties["alice"].id, 1_000i128), (parties["bob"].id, 0)].into();

    let genesis = Arc::new(Block::genesis());
    let mut tree = BlockTree::new(genesis.clone(), 100, ratio(1, 2), Some(initial));
    let signers = [&parties["sig1"]];

    // spending more than the balance
    let greedy = transfer(&keys, &parties["alice"], &parties["bob"], 2_000, 1, 5_000);
    let b = signed_block(&keys, &genesis, vec![greedy], &signers, &parties["mrg"], 5_000);
    assert!(tree.validate_block(&b, &keys, 5_000).contains(Violation::DoubleSpend));

    // an honest spend lands, then the same transaction shows up again on
    // the same branch
    let tx = transfer(&keys, &parties["alice"], &parties["bob"], 400, 1, 6_000);
    let b1 = signed_block(&keys, &genesis, vec![tx.clone()], &signers, &parties["mrg"], 6_000);
    assert!(tree.validate_block(&b1, &keys, 6_000).is_ok());
    tree.insert(Arc::new(b1.clone())).unwrap();

    let replay = signed_block(&keys, &b1, vec![tx], &signers, &parties["mrg"], 30_000);
    assert!(tree.validate_block(&replay, &keys, 30_000).contains(Violation::DoubleSpend));
}

#[test]
fn validation_violations_trigger_one_by_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (keys, parties) = setup_parties(&mut rng, &["alice", "bob", "sig1", "sig2", "mrg"]);
    let genesis = Arc::new(Block::genesis());
    let tree = BlockTree::new(genesis.clone(), 100, ratio(1, 2), None);
    let signers = [&parties["sig1"], &parties["sig2"]];
    let tx = transfer(&keys, &parties["alice"], &parties["bob"], 100, 1, 5_000);
    let good = signed_block(&keys, &genesis, vec![tx.clone()], &signers, &parties["mrg"], 5_000);
    assert!(tree.validate_block(&good, &keys, 5_000).is_ok());

    let mut unknown_parent = good.clone();
    unknown_parent.prev_hash = sha256(b"void");
    assert!(tree.validate_block(&unknown_parent, &keys, 5_000).contains(Violation::BadLinkage));

    let mut wrong_digest = good.clone();
    wrong_digest.tx_digest = sha256(b"tampered");
    assert!(tree.validate_block(&wrong_digest, &keys, 5_000).contains(Violation::BadLinkage));

    let mut missing_sig = good.clone();
    missing_sig.signer_sigs.pop();
    assert!(tree
        .validate_block(&missing_sig, &keys, 5_000)
        .contains(Violation::InsufficientSignatures));

    let mut doubled = good.clone();
    doubled.signer_sigs[1] = doubled.signer_sigs[0].clone();
    assert!(tree.validate_block(&doubled, &keys, 5_000).contains(Violation::DuplicateSigner));

    let mut forged = good.clone();
    forged.signer_sigs[0].signature = vec![0xde, 0xad];
    assert!(tree.validate_block(&forged, &keys, 5_000).contains(Violation::BadSignature));

    let mut far_future = good;
    far_future.timestamp_ms = 5_000 + 61_000;
    assert!(tree
        .validate_block(&far_future, &keys, 5_000)
        .contains(Violation::TimestampOutOfRange));
}

#[test]
fn chain_text_export_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let genesis = Arc::new(Block::genesis());
    let mut tree = BlockTree::new(genesis.clone(), 100, ratio(1, 2), None);
    let mut parent = (*genesis).clone();
    for i in 0..4u64 {
        // import re-derives the tx digest, so it has to be honest; blocks
        // stay distinct through the merger id
        let mut b = scaffold_block(&parent, i, &mut rng);
        b.tx_digest = hash_transactions(&b.tx_list);
        tree.insert(Arc::new(b.clone())).unwrap();
        parent = b;
    }

    let text = tree.export("testnet");
    let (chain_id, blocks) = BlockTree::import(&text).unwrap();
    assert_eq!(chain_id, "testnet");
    assert_eq!(blocks.len(), tree.canonical_path().len());
    assert_eq!(blocks[0].digest(), genesis.digest());
    assert_eq!(blocks.last().unwrap().digest(), *tree.canonical_path().last().unwrap());

    assert!(BlockTree::import("not a chain").is_err());
    let mut clipped = text.lines().take(2).collect::<Vec<_>>().join("\n");
    clipped.push_str("\nzzzz");
    assert!(BlockTree::import(&clipped).is_err());
}
