"""
Scoring function-call outputs
=============================
"""

# %%
from slmsearch.funcall import (
    EvalSample,
    FunctionCall,
    FunctionDef,
    Param,
    Ref,
    evaluate,
    parse_calls,
    render_prompt,
)

contact = FunctionDef("search_contact", (Param("name"),), "Find a contact's phone number.")
sms = FunctionDef("send_sms", (Param("phone_number"), Param("message")), "Send a text message.")
system, user = render_prompt([contact, sms], "Tell Bob I'll be there at 6")
print(system)
print(user)

# %% [markdown]
# Model output is one call per line. A bare name as a value refers to an
# earlier result.

# %%
output = 'c = search_contact(name="Bob")\nresult2 = send_sms(phone_number=c, message="at 6")'
parsed = parse_calls(output)
print(parsed.calls, parsed.skipped)

# %%
truth = EvalSample("Tell Bob I'll be there at 6", (contact, sms), (
    FunctionCall("result1", "search_contact", {"name": "Bob"}),
    FunctionCall("result2", "send_sms", {"phone_number": Ref("result1"), "message": "I'll be there at 6"}),
))
report = evaluate([output, "sorry, I can't do that"], [truth, truth])
print(report.table())
