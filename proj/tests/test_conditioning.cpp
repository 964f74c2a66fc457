#include "doctest.h"

#include "idguard/conditioning.hpp"
#include "idguard/errors.hpp"

using namespace idguard;
using namespace idguard::conditioning;

TEST_CASE("prompts are token bags over a closed vocabulary") {
  const auto v = ConceptVocabulary::standard();
  CHECK(v.parse("blue circle sks") == v.parse("sks   circle blue"));
  CHECK(v.parse("blue blue circle").ids().size() == 2);
  CHECK_THROWS_AS(v.parse("sks dog"), ValidationError);
  CHECK_THROWS_AS(v.parse(""), ValidationError);
  CHECK(v.render(v.parse("sks blue circle")) == "circle blue sks");
  const auto p = v.parse("sks circle hazard");
  CHECK(p.has_identity());
  CHECK(p.has_prohibited());
  CHECK(v.render(v.without_prohibited(p)) == "circle sks");
  CHECK(v.render(v.prohibited_only(p)) == "hazard");
  CHECK(v.render(v.with_prohibited(v.parse("sks circle"))) == "circle sks hazard");
  CHECK(v.without_prohibited(v.parse("hazard")) == v.null_prompt());
  CHECK_THROWS_AS(v.prohibited_only(v.parse("circle")), ValidationError);
}

TEST_CASE("blacklist controls which tokens are prohibited") {
  const auto none = ConceptVocabulary::standard({});
  CHECK_FALSE(none.parse("sks hazard").has_prohibited());
  const auto two = ConceptVocabulary::standard({"hazard", "red"});
  CHECK(two.parse("red").has_prohibited());
  CHECK_THROWS_AS(ConceptVocabulary::standard({"sks"}), ValidationError);
  CHECK_THROWS_AS(ConceptVocabulary::standard({"null"}), ValidationError);
  CHECK(ConceptVocabulary::from_json(two.to_json()).blacklist_ids() == two.blacklist_ids());
}

TEST_CASE("routing truth table over prompt categories and modes") {
  const auto v = ConceptVocabulary::standard();
  const LossRoute id{LossKind::DbInstance, LossKind::Wm};
  const LossRoute mal{LossKind::Cip, LossKind::Wm};
  const LossRoute plain{LossKind::DbPrior};
  for (auto mode : {RestrictionMode::Target, RestrictionMode::Untarget, RestrictionMode::Conditioning}) {
    CAPTURE(to_string(mode));
    CHECK(route_prompt(v, v.parse("sks circle blue"), mode) == id);
    CHECK(route_prompt(v, v.parse("sks circle blue hazard"), mode) == mal);
    CHECK(route_prompt(v, v.parse("circle blue"), mode) == plain);
    const auto prohibited = route_prompt(v, v.parse("hazard square"), mode);
    if (mode == RestrictionMode::Conditioning) {
      CHECK(prohibited == LossRoute{LossKind::Preserve});
    } else {
      CHECK(prohibited.empty());
    }
  }
}

TEST_CASE("restriction mode names round-trip") {
  for (auto m : {RestrictionMode::Target, RestrictionMode::Untarget, RestrictionMode::Conditioning}) {
    CHECK(restriction_mode_from_string(to_string(m)) == m);
  }
  CHECK_THROWS_AS(restriction_mode_from_string("erase"), ValidationError);
  CHECK(LossRoute{LossKind::Cip, LossKind::Wm}.str() == "{CIP, WM}");
}

TEST_CASE("prompt embedding sums token rows") {
  const auto v = ConceptVocabulary::standard();
  Tensor<double> table({v.size(), 2});
  for (int i = 0; i < v.size(); ++i) {
    table[2 * i] = i;
    table[2 * i + 1] = 10.0 * i;
  }
  const auto e = embed_prompts(ag::constant(table), {v.parse("circle blue"), v.parse("sks")}).value();
  const double s = v.id("circle") + v.id("blue");
  CHECK(e[0] == s);
  CHECK(e[1] == 10 * s);
  CHECK(e[2] == v.id("sks"));
}
