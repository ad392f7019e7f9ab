use rand::seq::SliceRandom;
use rand::Rng;

use super::vocab::Vocabulary;

/// A keyword-eligible slot category: its filler words and the phrase
/// frames (with `{}` marking the filler) that render it.
#[derive(Clone, Debug, PartialEq)]
pub struct Category {
    pub name: String,
    pub fillers: Vec<String>,
    pub phrases: Vec<String>,
}

/// Slotted sentence frames plus categorized fillers.
///
/// A template is a whitespace-tokenized frame where each `{}` is a phrase
/// slot. Rendering assigns a distinct category to every slot, picks a
/// filler and a phrase frame for it, and records where each filler lands.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGrammar {
    pub templates: Vec<String>,
    pub categories: Vec<Category>,
}

/// One rendered sentence with the filler of every slot, in slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub tokens: Vec<String>,
    /// `(category index, filler word)` per slot.
    pub fillers: Vec<(usize, String)>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn category(name: &str, fillers: &str, phrases: &[&str]) -> Category {
    Category {
        name: name.to_string(),
        fillers: words(fillers),
        phrases: phrases.iter().map(|p| p.to_string()).collect(),
    }
}

impl Default for SyntheticGrammar {
    fn default() -> Self {
        let templates = [
            "{} , {} and {} .",
            "{} {} , {} .",
            "meet {} , {} , {} and {} .",
            "{} , plus {} and {} !",
            "we love {} , {} and {} .",
            "{} : {} , {} , {} .",
            "try {} , {} , also {} .",
            "{} and {} , {} , {} and {} .",
            "here is {} , {} and {} , {} .",
            "{} , {} ; {} and {} .",
            "simply {} , {} .",
            "{} , {} , {} , {} and {} !",
        ];
        let categories = vec![
            category(
                "item",
                "shirt dress jacket coat sweater skirt scarf hoodie blouse vest cardigan jumper",
                &["this {}", "a {}", "the new {}"],
            ),
            category(
                "color",
                "red blue green black white grey pink navy beige yellow purple orange",
                &["in {}", "{} colored", "a {} tone"],
            ),
            category(
                "material",
                "cotton wool silk linen denim leather velvet satin cashmere nylon fleece chiffon",
                &["made of {}", "soft {} fabric", "crafted from {}"],
            ),
            category(
                "style",
                "casual elegant vintage classic sporty minimal chic relaxed formal modern retro bold",
                &["{} style", "a {} look", "feels {}"],
            ),
            category(
                "fit",
                "slim loose cropped oversized fitted tailored straight flared layered boxy stretchy petite",
                &["a {} fit", "cut {}", "{} shape"],
            ),
            category(
                "occasion",
                "work parties travel weddings weekends dates brunch holidays office concerts festivals dinners",
                &["great for {}", "made for {}", "perfect for {}"],
            ),
            category(
                "detail",
                "pockets buttons zippers pleats ruffles embroidery lace hood collar belt sleeves tassels",
                &["with {}", "featuring {}", "{} included"],
            ),
            category(
                "pattern",
                "striped floral checked dotted plain printed knitted quilted ribbed woven patched tiled",
                &["a {} pattern", "{} design", "looks {}"],
            ),
        ];
        SyntheticGrammar {
            templates: templates.iter().map(|t| t.to_string()).collect(),
            categories,
        }
    }
}

impl SyntheticGrammar {
    pub fn slot_count(&self, template: usize) -> usize {
        self.templates[template]
            .split_whitespace()
            .filter(|w| *w == "{}")
            .count()
    }

    /// Longest sentence any instantiation can produce.
    pub fn max_tokens(&self) -> usize {
        let longest_phrase = self
            .categories
            .iter()
            .flat_map(|c| &c.phrases)
            .map(|p| p.split_whitespace().count())
            .max()
            .unwrap_or(1);
        self.templates
            .iter()
            .map(|t| {
                t.split_whitespace()
                    .map(|w| if w == "{}" { longest_phrase } else { 1 })
                    .sum::<usize>()
            })
            .max()
            .unwrap_or(0)
    }

    /// Every word the grammar can emit, in a fixed order.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut v = Vocabulary::new([]);
        for t in &self.templates {
            for w in t.split_whitespace().filter(|w| *w != "{}") {
                v.push(w);
            }
        }
        for c in &self.categories {
            for p in &c.phrases {
                for w in p.split_whitespace().filter(|w| *w != "{}") {
                    v.push(w);
                }
            }
        }
        for c in &self.categories {
            for f in &c.fillers {
                v.push(f);
            }
        }
        v
    }

    /// Renders `template` with freshly drawn categories, fillers and phrases.
    /// Panics if the template has more slots than there are categories.
    pub fn render<R: Rng>(&self, template: usize, rng: &mut R) -> Rendered {
        let slots = self.slot_count(template);
        let mut cats: Vec<usize> = (0..self.categories.len()).collect();
        cats.shuffle(rng);
        cats.truncate(slots);
        let mut tokens = Vec::new();
        let mut fillers = Vec::with_capacity(slots);
        let mut next = cats.iter();
        for w in self.templates[template].split_whitespace() {
            if w != "{}" {
                tokens.push(w.to_string());
                continue;
            }
            let ci = *next.next().expect("slot count matches categories drawn");
            let cat = &self.categories[ci];
            let filler = cat.fillers.choose(rng).expect("category has fillers").clone();
            let phrase = cat.phrases.choose(rng).expect("category has phrases");
            for pw in phrase.split_whitespace() {
                tokens.push(if pw == "{}" { filler.clone() } else { pw.to_string() });
            }
            fillers.push((ci, filler));
        }
        Rendered { tokens, fillers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn filler_words_are_unique_and_absent_from_frames() {
        let g = SyntheticGrammar::default();
        let mut fillers = HashSet::new();
        for c in &g.categories {
            for f in &c.fillers {
                assert!(fillers.insert(f.clone()), "duplicate filler {f}");
            }
        }
        for t in g.templates.iter().chain(g.categories.iter().flat_map(|c| &c.phrases)) {
            for w in t.split_whitespace() {
                assert!(!fillers.contains(w), "frame word {w} is also a filler");
            }
        }
    }

    #[test]
    fn templates_fit_categories() {
        let g = SyntheticGrammar::default();
        assert_eq!(g.templates.len(), 12);
        for t in 0..g.templates.len() {
            assert!(g.slot_count(t) <= g.categories.len());
            assert!(g.slot_count(t) >= 2);
        }
        assert!(g.max_tokens() <= 30);
        let v = g.vocabulary();
        assert!(v.len() > 120 && v.len() < 220, "{}", v.len());
    }

    #[test]
    fn rendered_fillers_appear_in_slot_order() {
        let g = SyntheticGrammar::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 0..g.templates.len() {
            let r = g.render(t, &mut rng);
            let positions: Vec<usize> = r
                .fillers
                .iter()
                .map(|(_, f)| r.tokens.iter().position(|w| w == f).unwrap())
                .collect();
            assert!(positions.windows(2).all(|p| p[0] < p[1]));
        }
    }
}
