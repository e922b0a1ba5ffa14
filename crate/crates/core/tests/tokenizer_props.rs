use dscls::tokenizer::{decode, encode, train_vocab, Vocabulary, CLS, PAD, SEP};
use proptest::prelude::*;
use std::sync::OnceLock;

fn vocab() -> &'static Vocabulary {
    static V: OnceLock<Vocabulary> = OnceLock::new();
    V.get_or_init(|| {
        let corpus = [
            "यह एक परीक्षण वाक्य है",
            "नमस्ते दुनिया, यह हिंदी है",
            "the quick brown fox jumps over the lazy dog",
            "mixed हिंदी and english text 123",
        ];
        train_vocab(&corpus, 420).unwrap()
    })
}

proptest! {
    #[test]
    fn decode_inverts_encode(text in "\\PC{0,40}") {
        let v = vocab();
        let e = encode(v, &text, 512);
        prop_assert_eq!(decode(v, &e.ids).unwrap(), text);
    }

    #[test]
    fn encoding_layout(text in "[ a-zअ-ह]{0,80}", max_len in 2usize..40) {
        let v = vocab();
        let e = encode(v, &text, max_len);
        prop_assert_eq!(e.ids.len(), max_len);
        prop_assert_eq!(e.mask.len(), max_len);
        let n = e.len_unpadded();
        prop_assert!(n >= 2);
        prop_assert_eq!(e.ids[0], CLS);
        prop_assert_eq!(e.ids[n - 1], SEP);
        prop_assert!(e.mask[..n].iter().all(|&m| m == 1));
        prop_assert!(e.mask[n..].iter().all(|&m| m == 0));
        prop_assert!(e.ids[n..].iter().all(|&i| i == PAD));
        prop_assert!(e.ids.iter().all(|&i| (i as usize) < v.size()));
    }

    #[test]
    fn tokens_concatenate_to_input(text in "\\PC{0,60}") {
        let v = vocab();
        let bytes: Vec<u8> = v
            .tokenize(&text)
            .iter()
            .flat_map(|&id| v.token_bytes(id).unwrap().to_vec())
            .collect();
        prop_assert_eq!(bytes, text.as_bytes());
    }
}

#[test]
fn training_is_deterministic_and_json_round_trips() {
    let corpus = ["aa bb aa bb cc", "बहुत बहुत अच्छा"];
    let a = train_vocab(&corpus, 300).unwrap();
    let b = train_vocab(&corpus, 300).unwrap();
    assert_eq!(a, b);
    let back = Vocabulary::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
    let text = "aa बहुत cc";
    assert_eq!(encode(&back, text, 16), encode(&a, text, 16));
}
